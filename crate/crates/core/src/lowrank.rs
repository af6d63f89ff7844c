//! Low-rank replacements for the K/V projections.
//!
//! A projection `W` (`h_in × h_out`) is replaced by `A · B` with
//! `A: h_in × r` and `B: r × h_out`. The cache stores the latent `X · A`
//! instead of `X · W`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};
use crate::numerics::{
    frobenius_norm, matmul, qr_factor, solve_least_squares, thin_svd, Matrix, StorageDtype,
};
use crate::quant::KvQuantSpec;
use crate::tensorio::{read_container, write_container, Dtype, ModelConfig, Tensor, TensorMap};
use crate::transformer::TransformerWeights;

/// Std of the entries drawn by [`init_random`].
pub const RANDOM_INIT_STD: f64 = 0.02;
/// Floor for the scaling of channels with zero mean activation.
pub const ASVD_EPS: f64 = 1e-6;
/// Ridge term of the oracle's triangular solve.
pub const ORACLE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Key,
    Value,
}

impl Target {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Key => "k",
            Self::Value => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub a: Matrix,
    pub b: Matrix,
    pub target: Target,
    pub layer: usize,
}

impl LowRankFactors {
    pub fn new(a: Matrix, b: Matrix, target: Target, layer: usize) -> Result<Self> {
        let r = a.cols();
        if b.rows() != r {
            return Err(CskvError::shape(
                "LowRankFactors",
                format!("A {:?} and B {:?} disagree on rank", a.shape(), b.shape()),
            ));
        }
        if r == 0 || r > a.rows().min(b.cols()) {
            return Err(CskvError::shape(
                "LowRankFactors",
                format!("rank {r} outside 1..={}", a.rows().min(b.cols())),
            ));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(CskvError::numeric(
                "LowRankFactors",
                "non-finite factor entries",
            ));
        }
        Ok(Self {
            a,
            b,
            target,
            layer,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn h_in(&self) -> usize {
        self.a.rows()
    }

    pub fn h_out(&self) -> usize {
        self.b.cols()
    }

    pub fn with_slot(mut self, target: Target, layer: usize) -> Self {
        self.target = target;
        self.layer = layer;
        self
    }
}

/// Per-input-channel activation scaling for ASVD.
#[derive(Debug, Clone, PartialEq)]
pub struct AsvdScaling {
    pub s: Vec<f64>,
    pub alpha: f64,
}

/// Fraction of per-token channels removed → kept rank, rounded down, at least 1.
pub fn ratio_to_rank(ratio: f64, h_out: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CskvError::Input(format!(
            "compression ratio must lie in [0, 1), got {ratio}"
        )));
    }
    // 1e-9 absorbs representation error, e.g. (1 - 0.8) · 640 = 127.99999999999997
    let r = ((1.0 - ratio) * h_out as f64 + 1e-9).floor() as usize;
    Ok(r.clamp(1, h_out.max(1)))
}

pub fn init_random(seed: u64, h_in: usize, h_out: usize, rank: usize) -> Result<LowRankFactors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::random_normal(h_in, rank, RANDOM_INIT_STD, &mut rng);
    let b = Matrix::random_normal(rank, h_out, RANDOM_INIT_STD, &mut rng);
    LowRankFactors::new(a, b, Target::Key, 0)
}

fn check_rank(w: &Matrix, rank: usize) -> Result<()> {
    let max = w.rows().min(w.cols());
    if rank == 0 || rank > max {
        return Err(CskvError::Input(format!(
            "rank {rank} outside 1..={max} for W {:?}",
            w.shape()
        )));
    }
    Ok(())
}

/// Balanced split of the truncated SVD of `m`: `(U_r √Σ_r, √Σ_r Vt_r)`.
fn balanced_split(m: &Matrix, rank: usize) -> Result<(Matrix, Matrix)> {
    let svd = thin_svd(m)?;
    let root: Vec<f64> = svd.s[..rank].iter().map(|s| s.sqrt()).collect();
    let a = svd.u.slice_cols(0, rank).scale_cols(&root);
    let b = svd.vt.slice_rows(0, rank).scale_rows(&root);
    Ok((a, b))
}

pub fn init_svd(w: &Matrix, rank: usize) -> Result<LowRankFactors> {
    check_rank(w, rank)?;
    let (a, b) = balanced_split(w, rank)?;
    LowRankFactors::new(a, b, Target::Key, 0)
}

/// `s_i = mean_rows(|X[·, i]|)^alpha`, with zero channels mapped to [`ASVD_EPS`].
pub fn compute_asvd_scaling(x: &Matrix, alpha: f64) -> Result<AsvdScaling> {
    if x.is_empty() {
        return Err(CskvError::Input(
            "ASVD scaling needs non-empty activations".into(),
        ));
    }
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v.abs();
        }
    }
    let n = x.rows() as f64;
    let s = mean
        .into_iter()
        .map(|m| {
            let s = (m / n).powf(alpha);
            if s > 0.0 {
                s
            } else {
                ASVD_EPS
            }
        })
        .collect();
    Ok(AsvdScaling { s, alpha })
}

/// Truncated SVD of `diag(s) · W`, unscaled on the left: `A = diag(s)⁻¹ U_r √Σ_r`.
pub fn init_asvd(w: &Matrix, scaling: &AsvdScaling, rank: usize) -> Result<LowRankFactors> {
    check_rank(w, rank)?;
    if scaling.s.len() != w.rows() {
        return Err(CskvError::shape(
            "init_asvd",
            format!("{} scales for W with {} rows", scaling.s.len(), w.rows()),
        ));
    }
    if scaling.s.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(CskvError::Input(
            "ASVD scales must be positive and finite".into(),
        ));
    }
    let (a, b) = balanced_split(&w.scale_rows(&scaling.s), rank)?;
    let inv: Vec<f64> = scaling.s.iter().map(|s| 1.0 / s).collect();
    LowRankFactors::new(a.scale_rows(&inv), b, Target::Key, 0)
}

/// Closed-form minimizer of `‖XW − XAB‖_F` over rank-`r` products.
///
/// With `X = QR`, the objective equals `‖RW − RAB‖_F`, so the best `RAB` is
/// the rank-`r` truncation of `RW`; `A` is then recovered by back
/// substitution, or a small ridge solve if `R` is rank-deficient.
pub fn weighted_lowrank_oracle(x: &Matrix, w: &Matrix, rank: usize) -> Result<LowRankFactors> {
    check_rank(w, rank)?;
    if x.cols() != w.rows() {
        return Err(CskvError::shape(
            "weighted_lowrank_oracle",
            format!("X {:?} vs W {:?}", x.shape(), w.shape()),
        ));
    }
    let h_in = x.cols();
    let tall = if x.rows() < h_in {
        x.vstack(&Matrix::zeros(h_in - x.rows(), h_in))?
    } else {
        x.clone()
    };
    let (_, r) = qr_factor(&tall)?;
    let (a_prime, b) = balanced_split(&matmul(&r, w)?, rank)?;
    let a = match back_substitute(&r, &a_prime) {
        Some(a) => a,
        None => {
            let lhs = r.vstack(&Matrix::identity(h_in).scale(ORACLE_RIDGE.sqrt()))?;
            let rhs = a_prime.vstack(&Matrix::zeros(h_in, rank))?;
            solve_least_squares(&lhs, &rhs)?
        }
    };
    LowRankFactors::new(a, b, Target::Key, 0)
}

/// Solves `R · A = B` for upper-triangular `R`; `None` if `R` is numerically singular.
fn back_substitute(r: &Matrix, b: &Matrix) -> Option<Matrix> {
    let n = r.rows();
    let dmax = (0..n).map(|i| r.get(i, i).abs()).fold(0.0, f64::max);
    if dmax == 0.0 || (0..n).any(|i| r.get(i, i).abs() <= 1e-10 * dmax) {
        return None;
    }
    let mut a = Matrix::zeros(n, b.cols());
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut acc = b.get(i, c);
            for j in i + 1..n {
                acc -= r.get(i, j) * a.get(j, c);
            }
            a.set(i, c, acc / r.get(i, i));
        }
    }
    Some(a)
}

pub fn reconstruct_weight(f: &LowRankFactors) -> Matrix {
    matmul(&f.a, &f.b).expect("factor shapes checked on construction")
}

/// `‖XW − (XA)B‖_F`.
pub fn weighted_residual(x: &Matrix, w: &Matrix, f: &LowRankFactors) -> Result<f64> {
    let target = matmul(x, w)?;
    let approx = matmul(&matmul(x, &f.a)?, &f.b)?;
    Ok(frobenius_norm(&target.sub(&approx)?))
}

/// How a model is compressed: per-layer ranks, recency window, optional
/// latent quantization and the precision cache rows are stored at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub ratio_k: f64,
    pub ratio_v: f64,
    pub rank_k: Vec<usize>,
    pub rank_v: Vec<usize>,
    pub window: usize,
    pub quant: Option<KvQuantSpec>,
    #[serde(default)]
    pub storage: StorageDtype,
}

impl CompressionPlan {
    pub const DEFAULT_WINDOW: usize = 32;

    /// Same ratios on every layer.
    pub fn uniform(cfg: &ModelConfig, ratio_k: f64, ratio_v: f64, window: usize) -> Result<Self> {
        let rk = ratio_to_rank(ratio_k, cfg.d_kv)?;
        let rv = ratio_to_rank(ratio_v, cfg.d_kv)?;
        Ok(Self {
            ratio_k,
            ratio_v,
            rank_k: vec![rk; cfg.n_layers],
            rank_v: vec![rv; cfg.n_layers],
            window,
            quant: None,
            storage: StorageDtype::default(),
        })
    }

    /// Explicit rank on every layer; ratios are derived as `1 − r/h_out`.
    pub fn from_ranks(
        cfg: &ModelConfig,
        rank_k: usize,
        rank_v: usize,
        window: usize,
    ) -> Result<Self> {
        let h = cfg.d_kv;
        for r in [rank_k, rank_v] {
            if r == 0 || r > h {
                return Err(CskvError::Input(format!("rank {r} outside 1..={h}")));
            }
        }
        Ok(Self {
            ratio_k: 1.0 - rank_k as f64 / h as f64,
            ratio_v: 1.0 - rank_v as f64 / h as f64,
            rank_k: vec![rank_k; cfg.n_layers],
            rank_v: vec![rank_v; cfg.n_layers],
            window,
            quant: None,
            storage: StorageDtype::default(),
        })
    }

    /// The per-layer ranks stored in `factors`; ratios are taken from layer 0.
    pub fn for_factors(cfg: &ModelConfig, factors: &ModelFactors, window: usize) -> Result<Self> {
        let (rank_k, rank_v) = factors.ranks();
        let (Some(k0), Some(v0)) = (rank_k.first(), rank_v.first()) else {
            return Err(CskvError::Input("factors hold no layers".into()));
        };
        let h = cfg.d_kv as f64;
        let plan = Self {
            ratio_k: 1.0 - *k0 as f64 / h,
            ratio_v: 1.0 - *v0 as f64 / h,
            rank_k,
            rank_v,
            window,
            quant: None,
            storage: StorageDtype::default(),
        };
        plan.check(cfg)?;
        factors.check(cfg, &plan)?;
        Ok(plan)
    }

    pub fn with_quant(mut self, quant: Option<KvQuantSpec>) -> Self {
        self.quant = quant;
        self
    }

    pub fn with_storage(mut self, storage: StorageDtype) -> Self {
        self.storage = storage;
        self
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let mut errs = Vec::new();
        if self.rank_k.len() != cfg.n_layers || self.rank_v.len() != cfg.n_layers {
            errs.push(format!(
                "plan covers {}/{} layers, model has {}",
                self.rank_k.len(),
                self.rank_v.len(),
                cfg.n_layers
            ));
        }
        let max = cfg.d_kv.min(cfg.d_model);
        for (i, (k, v)) in self.rank_k.iter().zip(&self.rank_v).enumerate() {
            if *k == 0 || *k > max || *v == 0 || *v > max {
                errs.push(format!("layer {i}: ranks ({k}, {v}) outside 1..={max}"));
            }
        }
        if let Some(q) = &self.quant {
            if let Err(e) = q.key.check().and(q.value.check()) {
                errs.push(e.to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CskvError::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub key: LowRankFactors,
    pub value: LowRankFactors,
}

/// Factors for every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFactors {
    pub layers: Vec<LayerFactors>,
}

impl ModelFactors {
    /// Plain SVD factors of every layer's `W_K`/`W_V` at the plan's ranks.
    pub fn svd(weights: &TransformerWeights, plan: &CompressionPlan) -> Result<Self> {
        plan.check(&weights.config)?;
        let layers = weights
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(LayerFactors {
                    key: init_svd(&l.wk, plan.rank_k[i])?.with_slot(Target::Key, i),
                    value: init_svd(&l.wv, plan.rank_v[i])?.with_slot(Target::Value, i),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn get(&self, layer: usize, target: Target) -> &LowRankFactors {
        let l = &self.layers[layer];
        match target {
            Target::Key => &l.key,
            Target::Value => &l.value,
        }
    }

    /// Checks factor shapes against a model and plan.
    pub fn check(&self, cfg: &ModelConfig, plan: &CompressionPlan) -> Result<()> {
        let mut errs = Vec::new();
        if self.layers.len() != cfg.n_layers {
            errs.push(format!(
                "factors cover {} layers, model has {}",
                self.layers.len(),
                cfg.n_layers
            ));
        }
        for (i, l) in self.layers.iter().enumerate().take(cfg.n_layers) {
            for (f, want) in [(&l.key, plan.rank_k.get(i)), (&l.value, plan.rank_v.get(i))] {
                if f.h_in() != cfg.d_model || f.h_out() != cfg.d_kv {
                    errs.push(format!(
                        "layer {i} {:?}: factor maps {}→{}, model needs {}→{}",
                        f.target,
                        f.h_in(),
                        f.h_out(),
                        cfg.d_model,
                        cfg.d_kv
                    ));
                }
                if want.is_some_and(|r| *r != f.rank()) {
                    errs.push(format!(
                        "layer {i} {:?}: factor rank {} but plan asks for {}",
                        f.target,
                        f.rank(),
                        want.unwrap()
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CskvError::Validation(errs))
        }
    }

    /// Per layer `(rank_k, rank_v)`.
    pub fn ranks(&self) -> (Vec<usize>, Vec<usize>) {
        self.layers
            .iter()
            .map(|l| (l.key.rank(), l.value.rank()))
            .unzip()
    }

    /// `layers.{i}.{ak|bk|av|bv}`.
    pub fn to_tensors(&self, dtype: Dtype) -> TensorMap {
        let mut out = TensorMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            for f in [&l.key, &l.value] {
                let t = f.target.tag();
                out.insert(format!("layers.{i}.a{t}"), Tensor::from_matrix(&f.a, dtype));
                out.insert(format!("layers.{i}.b{t}"), Tensor::from_matrix(&f.b, dtype));
            }
        }
        out
    }

    pub fn from_tensors(tensors: &TensorMap) -> Result<Self> {
        let mut layers = Vec::new();
        while tensors.contains_key(&format!("layers.{}.ak", layers.len())) {
            let i = layers.len();
            let load = |target: Target| -> Result<LowRankFactors> {
                let t = target.tag();
                let get = |name: String| {
                    tensors
                        .get(&name)
                        .ok_or_else(|| CskvError::Format(format!("missing tensor {name}")))
                        .and_then(|t| t.to_matrix())
                };
                let a = get(format!("layers.{i}.a{t}"))?;
                let b = get(format!("layers.{i}.b{t}"))?;
                LowRankFactors::new(a, b, target, i)
            };
            layers.push(LayerFactors {
                key: load(Target::Key)?,
                value: load(Target::Value)?,
            });
        }
        if layers.is_empty() {
            return Err(CskvError::Format(
                "no factor tensors (layers.0.ak) found".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, dtype: Dtype) -> Result<()> {
        write_container(&self.to_tensors(dtype), path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_tensors(&read_container(path)?)
    }
}
