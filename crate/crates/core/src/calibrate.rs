//! Layer-wise reconstruction fine-tuning of the low-rank factors.
//!
//! Each layer's key and value factors are fitted independently against the
//! uncompressed projection on captured activations:
//! `L = mean((X·W − X·A·B)²)`.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};
use crate::lowrank::{
    compute_asvd_scaling, init_asvd, init_random, init_svd, weighted_lowrank_oracle,
    CompressionPlan, LayerFactors, LowRankFactors, ModelFactors, Target,
};
use crate::numerics::{matmul, matmul_nt, matmul_tn, solve_least_squares, Matrix, StorageDtype};
use crate::quant::{dequantize, fake_quant, quantize, ste_mask, KvQuantSpec, QuantSpec};
use crate::transformer::{prefill_with, BaselineKvCache, TransformerWeights};

/// Inputs to one layer's K/V projections (post-norm hidden states).
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub layer: usize,
    pub x: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CalibMode {
    #[default]
    Gradient,
    Als,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Svd,
    #[default]
    Asvd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub mode: CalibMode,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rows per gradient step; `None` uses every row.
    pub batch_rows: Option<usize>,
    /// Fine-tune with fake-quantized latents (gradient mode only).
    pub quant_aware: bool,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            mode: CalibMode::Gradient,
            steps: 100,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_rows: None,
            quant_aware: false,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CskvError::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_rows == Some(0) {
            return Err(CskvError::Config("batch_rows must be >= 1".into()));
        }
        if self.quant_aware && self.mode == CalibMode::Als {
            return Err(CskvError::Config(
                "quant-aware fine-tuning needs gradient mode".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub before: f64,
    pub after: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub key: TargetReport,
    pub value: TargetReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub layers: Vec<LayerReport>,
    pub total_before: f64,
    pub total_after: f64,
    pub wall_time_s: f64,
    pub config: CalibConfig,
}

impl CalibReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| CskvError::io(path, e))
    }
}

/// `Σ_layers (L_K + L_V)` after fine-tuning.
pub fn total_loss(report: &CalibReport) -> f64 {
    report
        .layers
        .iter()
        .map(|l| l.key.after + l.value.after)
        .sum()
}

/// Same sum over the initial losses.
pub fn total_loss_before(report: &CalibReport) -> f64 {
    report
        .layers
        .iter()
        .map(|l| l.key.before + l.value.before)
        .sum()
}

/// Line-delimited token streams, ids separated by whitespace. Blank lines are skipped.
pub fn read_token_streams(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CskvError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>().map_err(|_| {
                    CskvError::Input(format!("{}:{}: bad token id {t:?}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ids);
    }
    Ok(out)
}

/// Records `X` for the requested layers from baseline forward passes over
/// every stream, rows concatenated in stream order.
pub fn capture_activations(
    weights: &TransformerWeights,
    streams: &[Vec<u32>],
    layers: &[usize],
) -> Result<Vec<ActivationBatch>> {
    if streams.is_empty() || streams.iter().any(|s| s.is_empty()) {
        return Err(CskvError::Input(
            "calibration needs non-empty token streams".into(),
        ));
    }
    if let Some(l) = layers.iter().find(|l| **l >= weights.config.n_layers) {
        return Err(CskvError::Input(format!(
            "layer {l} out of range for a {}-layer model",
            weights.config.n_layers
        )));
    }
    let mut out: Vec<ActivationBatch> = layers
        .iter()
        .map(|l| ActivationBatch {
            layer: *l,
            x: Matrix::zeros(0, 0),
        })
        .collect();
    for s in streams {
        let mut cache = BaselineKvCache::new(weights.config.n_layers, StorageDtype::F64);
        let trace = prefill_with(weights, &mut cache, s)?;
        for batch in out.iter_mut() {
            let x = &trace.layer_inputs[batch.layer];
            for r in 0..x.rows() {
                batch.x.push_row(x.row(r));
            }
        }
    }
    Ok(out)
}

/// Mean squared reconstruction error `mean((XW − XAB)²)`.
pub fn layer_loss(x: &Matrix, w: &Matrix, f: &LowRankFactors) -> Result<f64> {
    let target = matmul(x, w)?;
    let z = matmul(x, &f.a)?;
    Ok(mse(&matmul(&z, &f.b)?, &target))
}

fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    let n = pred.as_slice().len().max(1) as f64;
    pred.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Loss and analytic gradients `(L, ∂L/∂A, ∂L/∂B)`.
///
/// With `Z = XA` (fake-quantized when `quant` is set), `E = ZB − XW` and
/// `N` elements: `∂L/∂B = (2/N)·Zᵀ E`, `∂L/∂A = Xᵀ((2/N)·E Bᵀ ⊙ M)` where
/// `M` is the straight-through mask (all ones without quantization).
pub fn layer_gradients(
    x: &Matrix,
    target: &Matrix,
    a: &Matrix,
    b: &Matrix,
    quant: Option<&QuantSpec>,
) -> Result<(f64, Matrix, Matrix)> {
    let z = matmul(x, a)?;
    let (zq, mask) = match quant {
        Some(spec) => {
            let q = quantize(&z, spec);
            let mask = ste_mask(&z, &q);
            (dequantize(&q), Some(mask))
        }
        None => (z, None),
    };
    let pred = matmul(&zq, b)?;
    let loss = mse(&pred, target);
    let scale = 2.0 / pred.as_slice().len() as f64;
    let e = pred.sub(target)?.scale(scale);
    let gb = matmul_tn(&zq, &e)?;
    let mut gz = matmul_nt(&e, b)?;
    if let Some(mask) = mask {
        gz.as_mut_slice()
            .iter_mut()
            .zip(mask)
            .for_each(|(g, keep)| {
                if !keep {
                    *g = 0.0
                }
            });
    }
    let ga = matmul_tn(x, &gz)?;
    Ok((loss, ga, gb))
}

/// Loss of factors evaluated with fake-quantized latents.
pub fn quantized_layer_loss(
    x: &Matrix,
    w: &Matrix,
    f: &LowRankFactors,
    spec: &QuantSpec,
) -> Result<f64> {
    let target = matmul(x, w)?;
    let zq = fake_quant(&matmul(x, &f.a)?, spec);
    Ok(mse(&matmul(&zq, &f.b)?, &target))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &CalibConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -=
                cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
    }
}

fn sample_every(steps: usize) -> usize {
    (steps / 100).max(1)
}

fn check_shapes(x: &Matrix, w: &Matrix, f: &LowRankFactors) -> Result<()> {
    if x.cols() != w.rows() || f.h_in() != w.rows() || f.h_out() != w.cols() {
        return Err(CskvError::shape(
            "finetune_layer",
            format!(
                "X {:?}, W {:?}, A {:?}, B {:?}",
                x.shape(),
                w.shape(),
                f.a.shape(),
                f.b.shape()
            ),
        ));
    }
    Ok(())
}

/// Fine-tunes one factor pair; returns the best factors seen (the initial
/// ones included) and loss samples.
pub fn finetune_layer(
    x: &Matrix,
    w: &Matrix,
    factors: &LowRankFactors,
    cfg: &CalibConfig,
) -> Result<(LowRankFactors, Vec<CurvePoint>)> {
    finetune_layer_quant_aware(x, w, factors, None, cfg)
}

/// [`finetune_layer`] with the latent `XA` passed through the quantizer in
/// the forward pass. `None` is the identity quantizer.
pub fn finetune_layer_quant_aware(
    x: &Matrix,
    w: &Matrix,
    factors: &LowRankFactors,
    quant: Option<&QuantSpec>,
    cfg: &CalibConfig,
) -> Result<(LowRankFactors, Vec<CurvePoint>)> {
    run_layer(x, w, factors, quant, cfg).map(|(f, curve, _)| (f, curve))
}

fn run_layer(
    x: &Matrix,
    w: &Matrix,
    factors: &LowRankFactors,
    quant: Option<&QuantSpec>,
    cfg: &CalibConfig,
) -> Result<(LowRankFactors, Vec<CurvePoint>, f64)> {
    cfg.check()?;
    check_shapes(x, w, factors)?;
    if quant.is_some() && cfg.mode == CalibMode::Als {
        return Err(CskvError::Config(
            "quant-aware fine-tuning needs gradient mode".into(),
        ));
    }
    let target = matmul(x, w)?;
    let eval = |a: &Matrix, b: &Matrix| -> Result<f64> {
        let mut z = matmul(x, a)?;
        if let Some(spec) = quant {
            z = fake_quant(&z, spec);
        }
        Ok(mse(&matmul(&z, b)?, &target))
    };
    let initial = eval(&factors.a, &factors.b)?;
    if !initial.is_finite() {
        return Err(CskvError::numeric(
            "finetune_layer",
            "initial loss is not finite",
        ));
    }
    let mut curve = vec![CurvePoint {
        step: 0,
        loss: initial,
    }];
    let mut best = (initial, factors.a.clone(), factors.b.clone());
    let every = sample_every(cfg.steps);
    let mut a = factors.a.clone();
    let mut b = factors.b.clone();

    match cfg.mode {
        CalibMode::Gradient => {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ ((factors.layer as u64) << 1) ^ (factors.target as u64),
            );
            let mut adam_a = Adam::new(a.as_slice().len());
            let mut adam_b = Adam::new(b.as_slice().len());
            let n = x.rows();
            for step in 1..=cfg.steps {
                let (xb, tb) = match cfg.batch_rows {
                    Some(rows) if rows < n => {
                        let start = rng.random_range(0..=n - rows);
                        (
                            x.slice_rows(start, start + rows),
                            target.slice_rows(start, start + rows),
                        )
                    }
                    _ => (x.clone(), target.clone()),
                };
                let (_, ga, gb) = layer_gradients(&xb, &tb, &a, &b, quant)?;
                adam_a.step(a.as_mut_slice(), ga.as_slice(), cfg);
                adam_b.step(b.as_mut_slice(), gb.as_slice(), cfg);
                let loss = eval(&a, &b)?;
                if !loss.is_finite() {
                    return Err(CskvError::numeric(
                        "finetune_layer",
                        format!("loss diverged at step {step}"),
                    ));
                }
                if loss < best.0 {
                    best = (loss, a.clone(), b.clone());
                }
                if step % every == 0 || step == cfg.steps {
                    curve.push(CurvePoint { step, loss });
                }
            }
        }
        CalibMode::Als => {
            // A given B solves A·B = X⁺·XW, computed once.
            let y = solve_least_squares(x, &target)?;
            for step in 1..=cfg.steps {
                b = solve_least_squares(&matmul(x, &a)?, &target)?;
                a = solve_least_squares(&b.transpose(), &y.transpose())?.transpose();
                let loss = eval(&a, &b)?;
                if !loss.is_finite() {
                    return Err(CskvError::numeric(
                        "finetune_layer",
                        format!("loss diverged at step {step}"),
                    ));
                }
                if loss < best.0 {
                    best = (loss, a.clone(), b.clone());
                }
                if step % every == 0 || step == cfg.steps {
                    curve.push(CurvePoint { step, loss });
                }
            }
        }
    }
    let (loss, a, b) = best;
    Ok((
        LowRankFactors::new(a, b, factors.target, factors.layer)?,
        curve,
        loss,
    ))
}

/// Initial factors for every layer in the plan, from activations for the
/// activation-aware variant.
pub fn initialize_factors(
    weights: &TransformerWeights,
    activations: &[ActivationBatch],
    plan: &CompressionPlan,
    init: InitKind,
    alpha: f64,
    seed: u64,
) -> Result<ModelFactors> {
    plan.check(&weights.config)?;
    let cfg = &weights.config;
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let (wk, wv) = (&weights.layers[i].wk, &weights.layers[i].wv);
            let (rk, rv) = (plan.rank_k[i], plan.rank_v[i]);
            let (k, v) = match init {
                InitKind::Random => (
                    init_random(seed.wrapping_add(2 * i as u64), cfg.d_model, cfg.d_kv, rk)?,
                    init_random(
                        seed.wrapping_add(2 * i as u64 + 1),
                        cfg.d_model,
                        cfg.d_kv,
                        rv,
                    )?,
                ),
                InitKind::Svd => (init_svd(wk, rk)?, init_svd(wv, rv)?),
                InitKind::Asvd => {
                    let x = activation_for(activations, i)?;
                    let s = compute_asvd_scaling(x, alpha)?;
                    (init_asvd(wk, &s, rk)?, init_asvd(wv, &s, rv)?)
                }
            };
            Ok(LayerFactors {
                key: k.with_slot(Target::Key, i),
                value: v.with_slot(Target::Value, i),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelFactors { layers })
}

/// Closed-form minimisers of each layer's reconstruction loss at the plan's
/// ranks (no fine-tuning involved).
pub fn oracle_factors(
    weights: &TransformerWeights,
    activations: &[ActivationBatch],
    plan: &CompressionPlan,
) -> Result<ModelFactors> {
    plan.check(&weights.config)?;
    let layers = (0..weights.config.n_layers)
        .into_par_iter()
        .map(|i| {
            let x = activation_for(activations, i)?;
            let lw = &weights.layers[i];
            Ok(LayerFactors {
                key: weighted_lowrank_oracle(x, &lw.wk, plan.rank_k[i])?.with_slot(Target::Key, i),
                value: weighted_lowrank_oracle(x, &lw.wv, plan.rank_v[i])?
                    .with_slot(Target::Value, i),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelFactors { layers })
}

fn activation_for(activations: &[ActivationBatch], layer: usize) -> Result<&Matrix> {
    activations
        .iter()
        .find(|a| a.layer == layer)
        .map(|a| &a.x)
        .ok_or_else(|| CskvError::Input(format!("no activations captured for layer {layer}")))
}

/// Fine-tunes every layer's key and value factors independently.
///
/// Quant-aware mode uses the plan's quantizer (or the default one).
pub fn finetune_model(
    weights: &TransformerWeights,
    activations: &[ActivationBatch],
    plan: &CompressionPlan,
    init: &ModelFactors,
    cfg: &CalibConfig,
) -> Result<(ModelFactors, CalibReport)> {
    cfg.check()?;
    plan.check(&weights.config)?;
    init.check(&weights.config, plan)?;
    let started = Instant::now();
    let quant = cfg.quant_aware.then(|| plan.quant.unwrap_or_default());
    let jobs: Vec<(usize, Target)> = (0..weights.config.n_layers)
        .flat_map(|i| [(i, Target::Key), (i, Target::Value)])
        .collect();
    let results: Vec<Result<(LowRankFactors, TargetReport)>> = jobs
        .par_iter()
        .map(|&(layer, target)| {
            let x = activation_for(activations, layer)?;
            let lw = &weights.layers[layer];
            let (w, spec) = match target {
                Target::Key => (&lw.wk, quant.map(|q: KvQuantSpec| q.key)),
                Target::Value => (&lw.wv, quant.map(|q: KvQuantSpec| q.value)),
            };
            let f0 = init.get(layer, target);
            let (f, curve, after) = run_layer(x, w, f0, spec.as_ref(), cfg)?;
            let report = TargetReport {
                before: curve[0].loss,
                after,
                curve,
            };
            Ok((f, report))
        })
        .collect();

    let mut errs = Vec::new();
    let mut done = Vec::with_capacity(results.len());
    for (r, (layer, target)) in results.into_iter().zip(&jobs) {
        match r {
            Ok(v) => done.push(v),
            Err(e) => errs.push(format!("layer {layer} {target:?}: {e}")),
        }
    }
    if !errs.is_empty() {
        return Err(CskvError::Validation(errs));
    }
    let mut it = done.into_iter();
    let mut layers = Vec::new();
    let mut reports = Vec::new();
    for layer in 0..weights.config.n_layers {
        let (k, kr) = it.next().expect("one job per target");
        let (v, vr) = it.next().expect("one job per target");
        layers.push(LayerFactors { key: k, value: v });
        reports.push(LayerReport {
            layer,
            key: kr,
            value: vr,
        });
    }
    let mut report = CalibReport {
        layers: reports,
        total_before: 0.0,
        total_after: 0.0,
        wall_time_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    report.total_before = total_loss_before(&report);
    report.total_after = total_loss(&report);
    Ok((ModelFactors { layers }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::weighted_lowrank_oracle;
    use crate::transformer::{toy_config, RandomModelSpec};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn instance(seed: u64, n: usize, h: usize) -> (Matrix, Matrix) {
        let mut r = rng(seed);
        let scales: Vec<f64> = (0..h)
            .map(|_| 10f64.powf(r.random_range(-1.0..1.0)))
            .collect();
        let x = Matrix::random_normal(n, h, 1.0, &mut r).scale_cols(&scales);
        let w = Matrix::random_normal(h, h, 1.0 / (h as f64).sqrt(), &mut r);
        (x, w)
    }

    fn als(steps: usize) -> CalibConfig {
        CalibConfig {
            mode: CalibMode::Als,
            steps,
            ..CalibConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        let (x, w) = instance(1, 12, 6);
        let full = init_svd(&w, 6).unwrap();
        assert!(layer_loss(&x, &w, &full).unwrap() < 1e-20);
        let zero_x = Matrix::zeros(5, 6);
        let f = init_svd(&w, 2).unwrap();
        assert_eq!(layer_loss(&zero_x, &w, &f).unwrap(), 0.0);
        let small_x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let small_w = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let f = LowRankFactors::new(
            Matrix::from_rows(&[vec![1.0], vec![0.5]]).unwrap(),
            Matrix::from_rows(&[vec![0.2, 0.4, 1.0]]).unwrap(),
            Target::Key,
            0,
        )
        .unwrap();
        let mut total = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                let mut xw = 0.0;
                let mut xab = 0.0;
                for k in 0..2 {
                    xw += small_x.get(i, k) * small_w.get(k, j);
                    xab += small_x.get(i, k) * f.a.get(k, 0) * f.b.get(0, j);
                }
                total += (xw - xab) * (xw - xab);
            }
        }
        assert!((layer_loss(&small_x, &small_w, &f).unwrap() - total / 6.0).abs() < 1e-14);
    }

    #[test]
    fn total_loss_sums_parts() {
        let tr = |v: f64| TargetReport {
            before: v,
            after: v,
            curve: vec![],
        };
        let mut report = CalibReport {
            layers: vec![LayerReport {
                layer: 0,
                key: tr(1.0),
                value: tr(2.0),
            }],
            total_before: 0.0,
            total_after: 0.0,
            wall_time_s: 0.0,
            config: CalibConfig::default(),
        };
        assert_eq!(total_loss(&report), 3.0);
        report.layers[0].key = tr(0.0);
        report.layers[0].value = tr(0.0);
        assert_eq!(total_loss(&report), 0.0);
    }

    #[test]
    fn capture_shapes_and_consistency() {
        let cfg = toy_config(1, 16, 2, 32);
        let w = TransformerWeights::random(&RandomModelSpec::new(cfg, 2)).unwrap();
        let acts = capture_activations(&w, &[vec![1, 2, 3, 4]], &[0]).unwrap();
        assert_eq!(acts[0].x.shape(), (4, 16));
        let twice = capture_activations(&w, &[vec![1, 2, 3, 4], vec![1, 2, 3, 4]], &[0]).unwrap();
        assert_eq!(twice[0].x.slice_rows(0, 4), twice[0].x.slice_rows(4, 8));
        let mut cache = BaselineKvCache::new(1, StorageDtype::F64);
        let trace = prefill_with(&w, &mut cache, &[1, 2, 3, 4]).unwrap();
        let k = matmul(&acts[0].x, &w.layers[0].wk).unwrap();
        assert!(k.max_abs_diff(&trace.keys[0]) < 1e-10);
        assert!(capture_activations(&w, &[vec![99]], &[0]).is_err());
        assert!(capture_activations(&w, &[], &[0]).is_err());
    }

    #[test]
    fn als_fixed_point_at_oracle() {
        let (x, w) = instance(3, 64, 12);
        let f = weighted_lowrank_oracle(&x, &w, 4).unwrap();
        let before = layer_loss(&x, &w, &f).unwrap();
        let (g, curve) = finetune_layer(&x, &w, &f, &als(10)).unwrap();
        assert!((layer_loss(&x, &w, &g).unwrap() - before).abs() <= 1e-9);
        assert!(curve.iter().all(|c| (c.loss - before).abs() <= 1e-9));
    }

    #[test]
    fn als_converges_to_oracle_monotonically() {
        for seed in 0..5 {
            let (x, w) = instance(10 + seed, 128, 16);
            let oracle = layer_loss(&x, &w, &weighted_lowrank_oracle(&x, &w, 4).unwrap()).unwrap();
            let init = init_svd(&w, 4).unwrap();
            let (f, curve) = finetune_layer(&x, &w, &init, &als(50)).unwrap();
            for pair in curve.windows(2) {
                assert!(pair[1].loss <= pair[0].loss + 1e-10);
            }
            assert!(layer_loss(&x, &w, &f).unwrap() <= oracle * 1.05);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..3 {
            let (x, w) = instance(20 + seed, 16, 8);
            let target = matmul(&x, &w).unwrap();
            let f = init_random(seed, 8, 8, 3).unwrap();
            let (_, ga, gb) = layer_gradients(&x, &target, &f.a, &f.b, None).unwrap();
            let h = 1e-5;
            let loss = |a: &Matrix, b: &Matrix| layer_gradients(&x, &target, a, b, None).unwrap().0;
            for i in 0..f.a.as_slice().len() {
                let (mut p, mut m) = (f.a.clone(), f.a.clone());
                p.as_mut_slice()[i] += h;
                m.as_mut_slice()[i] -= h;
                let num = (loss(&p, &f.b) - loss(&m, &f.b)) / (2.0 * h);
                let ana = ga.as_slice()[i];
                assert!(
                    (num - ana).abs() <= 1e-4 * num.abs().max(1e-8),
                    "A[{i}] {ana} vs {num}"
                );
            }
            for i in 0..f.b.as_slice().len() {
                let (mut p, mut m) = (f.b.clone(), f.b.clone());
                p.as_mut_slice()[i] += h;
                m.as_mut_slice()[i] -= h;
                let num = (loss(&f.a, &p) - loss(&f.a, &m)) / (2.0 * h);
                let ana = gb.as_slice()[i];
                assert!(
                    (num - ana).abs() <= 1e-4 * num.abs().max(1e-8),
                    "B[{i}] {ana} vs {num}"
                );
            }
        }
    }

    #[test]
    fn gradient_mode_never_worsens_and_improves() {
        let (x, w) = instance(30, 96, 16);
        let s = compute_asvd_scaling(&x, 0.5).unwrap();
        let init = init_asvd(&w, &s, 4).unwrap();
        let cfg = CalibConfig {
            steps: 200,
            learning_rate: 1e-3,
            ..CalibConfig::default()
        };
        let before = layer_loss(&x, &w, &init).unwrap();
        let (f, curve) = finetune_layer(&x, &w, &init, &cfg).unwrap();
        let after = layer_loss(&x, &w, &f).unwrap();
        assert!(after < before);
        assert_eq!(curve.first().unwrap().step, 0);
        assert_eq!(curve.last().unwrap().step, 200);
        // an absurd step size still returns the best seen factors
        let wild = CalibConfig {
            steps: 20,
            learning_rate: 10.0,
            ..CalibConfig::default()
        };
        let (g, _) = finetune_layer(&x, &w, &init, &wild).unwrap();
        assert!(layer_loss(&x, &w, &g).unwrap() <= before);
    }

    #[test]
    fn batched_steps_are_deterministic() {
        let (x, w) = instance(31, 80, 8);
        let init = init_svd(&w, 3).unwrap();
        let cfg = CalibConfig {
            steps: 30,
            learning_rate: 1e-3,
            batch_rows: Some(16),
            seed: 5,
            ..CalibConfig::default()
        };
        let a = finetune_layer(&x, &w, &init, &cfg).unwrap();
        let b = finetune_layer(&x, &w, &init, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_quantizer_is_plain_mode() {
        let (x, w) = instance(32, 40, 8);
        let init = init_svd(&w, 3).unwrap();
        let cfg = CalibConfig {
            steps: 15,
            learning_rate: 1e-3,
            ..CalibConfig::default()
        };
        assert_eq!(
            finetune_layer(&x, &w, &init, &cfg).unwrap(),
            finetune_layer_quant_aware(&x, &w, &init, None, &cfg).unwrap()
        );
    }

    #[test]
    fn representable_constant_latents_quantize_exactly() {
        // identical rows of ones and dyadic A entries give constant fp16 latents
        let x = Matrix::from_fn(40, 4, |_, _| 1.0);
        let a = Matrix::from_fn(4, 2, |r, _| (r as f64 + 1.0) / 64.0);
        let b = Matrix::random_normal(2, 4, 1.0, &mut rng(33));
        let w = Matrix::random_normal(4, 4, 1.0, &mut rng(34));
        let target = matmul(&x, &w).unwrap();
        for spec in [QuantSpec::keys(), QuantSpec::values()] {
            let plain = layer_gradients(&x, &target, &a, &b, None).unwrap();
            let qat = layer_gradients(&x, &target, &a, &b, Some(&spec)).unwrap();
            assert!((plain.0 - qat.0).abs() < 1e-12);
            assert!(plain.1.max_abs_diff(&qat.1) < 1e-8);
            assert!(plain.2.max_abs_diff(&qat.2) < 1e-8);
        }
        // zero activations: both modes are a no-op
        let z = Matrix::zeros(32, 4);
        let f = LowRankFactors::new(a, b, Target::Key, 0).unwrap();
        let cfg = CalibConfig {
            steps: 5,
            ..CalibConfig::default()
        };
        let p = finetune_layer(&z, &w, &f, &cfg).unwrap().0;
        let q = finetune_layer_quant_aware(&z, &w, &f, Some(&QuantSpec::keys()), &cfg)
            .unwrap()
            .0;
        assert!(p.a.max_abs_diff(&q.a) < 1e-8 && p.b.max_abs_diff(&q.b) < 1e-8);
    }

    #[test]
    fn model_finetune_reduces_total_and_layers_are_independent() {
        let cfg = toy_config(2, 16, 2, 32);
        let w = TransformerWeights::random(&RandomModelSpec::new(cfg.clone(), 7)).unwrap();
        let streams: Vec<Vec<u32>> = (0..3)
            .map(|s| (0..24).map(|i| (i * 5 + s * 3) % 32).collect())
            .collect();
        let acts = capture_activations(&w, &streams, &[0, 1]).unwrap();
        let plan = CompressionPlan::uniform(&cfg, 0.5, 0.5, 4).unwrap();
        let init = initialize_factors(&w, &acts, &plan, InitKind::Asvd, 0.5, 0).unwrap();
        let calib = CalibConfig {
            steps: 50,
            learning_rate: 1e-3,
            ..CalibConfig::default()
        };
        let (f, report) = finetune_model(&w, &acts, &plan, &init, &calib).unwrap();
        assert!(report.total_after < report.total_before);
        assert!((report.total_after - total_loss(&report)).abs() < 1e-12);

        let reversed: Vec<ActivationBatch> = acts.iter().rev().cloned().collect();
        let (g, _) = finetune_model(&w, &reversed, &plan, &init, &calib).unwrap();
        assert_eq!(f, g);

        let bad = ModelFactors {
            layers: init.layers[..1].to_vec(),
        };
        assert!(finetune_model(&w, &acts, &plan, &bad, &calib).is_err());
        assert!(initialize_factors(&w, &acts[..1], &plan, InitKind::Asvd, 0.5, 0).is_err());
    }

    #[test]
    fn config_validation_and_streams() {
        let bad = CalibConfig {
            learning_rate: 0.0,
            ..CalibConfig::default()
        };
        assert!(bad.check().is_err());
        let qals = CalibConfig {
            mode: CalibMode::Als,
            quant_aware: true,
            ..CalibConfig::default()
        };
        assert!(qals.check().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.txt");
        std::fs::write(&p, "1 2 3\n\n4 5\n").unwrap();
        assert_eq!(
            read_token_streams(&p).unwrap(),
            vec![vec![1, 2, 3], vec![4, 5]]
        );
        std::fs::write(&p, "1 x\n").unwrap();
        assert!(read_token_streams(&p).is_err());
    }
}
