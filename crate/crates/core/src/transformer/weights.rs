use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CskvError, Result};
use crate::numerics::{matmul_nt, qr_factor, Matrix};
use crate::tensorio::{validate_config, Dtype, ModelConfig, Tensor, TensorMap};

use super::ops::Rope;

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_mlp_in: Matrix,
    pub w_mlp_out: Matrix,
    pub norm1: Vec<f64>,
    pub norm2: Vec<f64>,
}

/// Decoder weights with the row-vector convention `y = x · W`
/// (`W` stored as `[in, out]`).
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Matrix,
}

/// Settings for engine-generated random models.
#[derive(Debug, Clone)]
pub struct RandomModelSpec {
    pub config: ModelConfig,
    pub seed: u64,
    /// Singular values of `W_K`/`W_V` follow `(i+1)^-decay`, rescaled so the
    /// Frobenius norm matches a `N(0, 1/h_in)` matrix. Zero gives plain
    /// Gaussian projections.
    pub kv_spectrum_decay: f64,
}

impl RandomModelSpec {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            kv_spectrum_decay: 1.0,
        }
    }
}

/// Small MHA config used by tests and demos.
pub fn toy_config(
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    vocab_size: usize,
) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_head: d_model / n_heads,
        d_model,
        d_kv: d_model,
        d_ff: Some(2 * d_model),
        vocab_size,
        max_position: 8192,
        rope_theta: 10_000.0,
    }
}

/// Random `h_in × h_out` matrix with a prescribed power-law singular spectrum.
pub fn random_spectral_matrix(
    h_in: usize,
    h_out: usize,
    decay: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    if decay == 0.0 {
        return Matrix::random_normal(h_in, h_out, 1.0 / (h_in as f64).sqrt(), rng);
    }
    let k = h_in.min(h_out);
    let (u, _) = qr_factor(&Matrix::random_normal(h_in, k, 1.0, rng)).expect("tall");
    let (v, _) = qr_factor(&Matrix::random_normal(h_out, k, 1.0, rng)).expect("tall");
    let raw: Vec<f64> = (0..k).map(|i| ((i + 1) as f64).powf(-decay)).collect();
    let energy: f64 = raw.iter().map(|s| s * s).sum();
    let norm = (h_out as f64 / energy).sqrt();
    let sigma: Vec<f64> = raw.iter().map(|s| s * norm).collect();
    matmul_nt(&u.scale_cols(&sigma), &v).expect("shapes")
}

impl TransformerWeights {
    pub fn random(spec: &RandomModelSpec) -> Result<Self> {
        let cfg = spec.config.clone();
        cfg.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (dm, dkv, dff) = (cfg.d_model, cfg.d_kv, cfg.d_ff());
        let embed = Matrix::random_normal(cfg.vocab_size, dm, 1.0, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: Matrix::random_normal(dm, dkv, 1.0 / (dm as f64).sqrt(), &mut rng),
                wk: random_spectral_matrix(dm, dkv, spec.kv_spectrum_decay, &mut rng),
                wv: random_spectral_matrix(dm, dkv, spec.kv_spectrum_decay, &mut rng),
                wo: Matrix::random_normal(dkv, dm, 1.0 / (dkv as f64).sqrt(), &mut rng),
                w_mlp_in: Matrix::random_normal(dm, dff, 1.0 / (dm as f64).sqrt(), &mut rng),
                w_mlp_out: Matrix::random_normal(dff, dm, 1.0 / (dff as f64).sqrt(), &mut rng),
                norm1: vec![1.0; dm],
                norm2: vec![1.0; dm],
            })
            .collect();
        let lm_head = Matrix::random_normal(dm, cfg.vocab_size, 1.0 / (dm as f64).sqrt(), &mut rng);
        Ok(Self {
            config: cfg,
            embed,
            layers,
            final_norm: vec![1.0; dm],
            lm_head,
        })
    }

    pub fn rope(&self) -> Rope {
        Rope {
            n_heads: self.config.n_heads,
            d_head: self.config.d_head,
            theta: self.config.rope_theta,
        }
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: &TensorMap) -> Result<Self> {
        validate_config(cfg, tensors)?;
        let mat = |name: &str| -> Result<Matrix> { tensors[name].to_matrix() };
        let vector = |name: &str| -> Vec<f64> { tensors[name].values.clone() };
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                Ok(LayerWeights {
                    wq: mat(&format!("{p}.wq"))?,
                    wk: mat(&format!("{p}.wk"))?,
                    wv: mat(&format!("{p}.wv"))?,
                    wo: mat(&format!("{p}.wo"))?,
                    w_mlp_in: mat(&format!("{p}.w_mlp_in"))?,
                    w_mlp_out: mat(&format!("{p}.w_mlp_out"))?,
                    norm1: vector(&format!("{p}.norm1")),
                    norm2: vector(&format!("{p}.norm2")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            embed: mat("embed")?,
            layers,
            final_norm: vector("final_norm"),
            lm_head: mat("lm_head")?,
        })
    }

    /// Tensors in the container naming convention, in a fixed order.
    pub fn to_tensors(&self, dtype: Dtype) -> TensorMap {
        let mut out = TensorMap::new();
        out.insert("embed".into(), Tensor::from_matrix(&self.embed, dtype));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.insert(format!("{p}.wq"), Tensor::from_matrix(&l.wq, dtype));
            out.insert(format!("{p}.wk"), Tensor::from_matrix(&l.wk, dtype));
            out.insert(format!("{p}.wv"), Tensor::from_matrix(&l.wv, dtype));
            out.insert(format!("{p}.wo"), Tensor::from_matrix(&l.wo, dtype));
            out.insert(
                format!("{p}.w_mlp_in"),
                Tensor::from_matrix(&l.w_mlp_in, dtype),
            );
            out.insert(
                format!("{p}.w_mlp_out"),
                Tensor::from_matrix(&l.w_mlp_out, dtype),
            );
            out.insert(format!("{p}.norm1"), Tensor::vector(l.norm1.clone(), dtype));
            out.insert(format!("{p}.norm2"), Tensor::vector(l.norm2.clone(), dtype));
        }
        out.insert(
            "final_norm".into(),
            Tensor::vector(self.final_norm.clone(), dtype),
        );
        out.insert("lm_head".into(), Tensor::from_matrix(&self.lm_head, dtype));
        out
    }

    pub fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(CskvError::Input(format!(
                "token id {token} out of range for vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}
