use serde::{Deserialize, Serialize};

use crate::bibranch::BiBranchCache;
use crate::error::{CskvError, Result};
use crate::lowrank::Target;
use crate::numerics::{dot, l2_norm, matmul, Matrix};
use crate::transformer::{decode_step_with, prefill_with, KvCache, TransformerWeights};

/// Decode-step outputs of one teacher-forced pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Run {
    pub tokens: Vec<u32>,
    /// One logit row per forced token.
    pub logits: Vec<Vec<f64>>,
    /// `[step][layer]` attention outputs.
    pub attn: Vec<Vec<Vec<f64>>>,
}

/// Prefills `prompt`, then feeds `forced` one token at a time.
pub fn teacher_forced<C: KvCache + ?Sized>(
    weights: &TransformerWeights,
    cache: &mut C,
    prompt: &[u32],
    forced: &[u32],
) -> Result<Run> {
    prefill_with(weights, cache, prompt)?;
    let mut run = Run {
        tokens: forced.to_vec(),
        ..Run::default()
    };
    for t in forced {
        let step = decode_step_with(weights, cache, *t)?;
        run.logits.push(step.logits);
        run.attn.push(step.attn_outputs);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FidelityReport {
    /// `‖l − l_ref‖ / ‖l_ref‖` per forced position.
    pub logit_errors: Vec<f64>,
    pub mean_logit_err: f64,
    /// Mean over positions and layers.
    pub attention_cosine: f64,
    /// Mean relative L2 error of attention outputs.
    pub attention_err: f64,
    /// Per layer `‖[K̂ V̂] − [K V]‖_F / ‖[K V]‖_F` over every cached token;
    /// empty for caches that do not reconstruct history.
    pub layer_residuals: Vec<f64>,
}

fn rel_l2(a: &[f64], reference: &[f64]) -> f64 {
    let num = a
        .iter()
        .zip(reference)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den = l2_norm(reference);
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num / den
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Compares a compressed run against the baseline run on the same tokens.
pub fn output_fidelity(baseline: &Run, compressed: &Run) -> Result<FidelityReport> {
    if baseline.tokens != compressed.tokens || baseline.logits.len() != compressed.logits.len() {
        return Err(CskvError::Input(
            "fidelity needs runs over the same tokens".into(),
        ));
    }
    let logit_errors: Vec<f64> = baseline
        .logits
        .iter()
        .zip(&compressed.logits)
        .map(|(b, c)| rel_l2(c, b))
        .collect();
    let pairs = || {
        baseline
            .attn
            .iter()
            .zip(&compressed.attn)
            .flat_map(|(b, c)| b.iter().zip(c.iter()))
    };
    Ok(FidelityReport {
        mean_logit_err: mean(logit_errors.iter().copied()),
        logit_errors,
        attention_cosine: mean(pairs().map(|(b, c)| cosine(c, b))),
        attention_err: mean(pairs().map(|(b, c)| rel_l2(c, b))),
        layer_residuals: Vec::new(),
    })
}

/// Relative reconstruction residual of every layer's cached history against
/// reference pre-rotation keys and values.
pub fn layer_residuals(
    cache: &BiBranchCache<'_>,
    keys: &[Matrix],
    values: &[Matrix],
) -> Result<Vec<f64>> {
    let factors = cache.factors();
    (0..keys.len())
        .map(|layer| {
            let (lk, lv) = cache.latents(layer);
            if lk.rows() != keys[layer].rows() {
                return Err(CskvError::shape(
                    "layer_residuals",
                    format!(
                        "layer {layer}: {} latent rows vs {} reference rows",
                        lk.rows(),
                        keys[layer].rows()
                    ),
                ));
            }
            let kh = matmul(lk, &factors.get(layer, Target::Key).b)?;
            let vh = matmul(lv, &factors.get(layer, Target::Value).b)?;
            let sq = |m: &Matrix| l2_norm(m.as_slice()).powi(2);
            let num = (sq(&kh.sub(&keys[layer])?) + sq(&vh.sub(&values[layer])?)).sqrt();
            let den = (sq(&keys[layer]) + sq(&values[layer])).sqrt();
            Ok(if den == 0.0 { 0.0 } else { num / den })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(tokens: Vec<u32>, logits: Vec<Vec<f64>>, attn: Vec<Vec<Vec<f64>>>) -> Run {
        Run {
            tokens,
            logits,
            attn,
        }
    }

    #[test]
    fn identical_runs_are_exact() {
        let r = run(
            vec![1, 2],
            vec![vec![1.0, -2.0], vec![0.5, 0.5]],
            vec![vec![vec![1.0, 2.0]]; 2],
        );
        let f = output_fidelity(&r, &r).unwrap();
        assert_eq!(f.logit_errors, vec![0.0, 0.0]);
        assert_eq!(f.mean_logit_err, 0.0);
        assert!((f.attention_cosine - 1.0).abs() < 1e-15);
        assert_eq!(f.attention_err, 0.0);
    }

    #[test]
    fn hand_computed_metrics() {
        let b = run(
            vec![7],
            vec![vec![3.0, 4.0]],
            vec![vec![vec![1.0, 0.0], vec![0.0, 2.0]]],
        );
        let c = run(
            vec![7],
            vec![vec![3.0, 3.0]],
            vec![vec![vec![0.0, 1.0], vec![0.0, -2.0]]],
        );
        let f = output_fidelity(&b, &c).unwrap();
        assert!((f.logit_errors[0] - 0.2).abs() < 1e-15);
        // Cosines 0 and -1; relative errors sqrt(2) and 2.
        assert!((f.attention_cosine + 0.5).abs() < 1e-15);
        assert!((f.attention_err - (2f64.sqrt() + 2.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_runs_rejected() {
        let a = run(vec![1], vec![vec![1.0]], vec![vec![]]);
        let b = run(vec![2], vec![vec![1.0]], vec![vec![]]);
        assert!(output_fidelity(&a, &b).is_err());
    }
}
