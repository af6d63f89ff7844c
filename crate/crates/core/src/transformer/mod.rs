//! Reference decoder-only transformer (RMSNorm, RoPE, MHA, SiLU MLP).
//!
//! Keys are cached before rotation; every attention call rotates them by
//! their absolute positions. All cache variants go through [`prefill_with`]
//! and [`decode_step_with`], so differences between them come only from what
//! each [`KvCache`] stores.

mod forward;
mod ops;
mod weights;

pub use forward::{
    argmax, attend_rows, decode_step_baseline, decode_step_with, generate_with, greedy_generate,
    prefill_baseline, prefill_with, BaselineKvCache, KvCache, LayerPrefill, LayerStep,
    PrefillOutput, StepOutput,
};
pub(crate) use forward::{stored, stored_row};
pub use ops::{
    attention_forward, attention_prefix, attention_with_probs, rmsnorm, rope_rotate, silu,
    softmax_in_place, Rope, RMS_EPS,
};
pub use weights::{
    random_spectral_matrix, toy_config, LayerWeights, RandomModelSpec, TransformerWeights,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StorageDtype;

    fn model(layers: usize, seed: u64) -> TransformerWeights {
        TransformerWeights::random(&RandomModelSpec::new(toy_config(layers, 32, 4, 64), seed))
            .unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn prefill_then_decode_matches_longer_prefill() {
        for (layers, len) in [(1usize, 1usize), (2, 7), (3, 40), (2, 256)] {
            let w = model(layers, 11 + len as u64);
            let prompt: Vec<u32> = (0..len as u32).map(|i| (i * 7 + 3) % 64).collect();
            let next = 42;
            let (_, mut cache) = prefill_baseline(&w, &prompt, StorageDtype::F64).unwrap();
            let step = decode_step_baseline(&w, &mut cache, next).unwrap();
            let mut full = prompt.clone();
            full.push(next);
            let (logits, _) = prefill_baseline(&w, &full, StorageDtype::F64).unwrap();
            let last = logits.row(len);
            let diff = step
                .iter()
                .zip(last)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-8, "layers {layers} len {len}: {diff}");
            assert_eq!(cache.len(), len + 1);
        }
    }

    #[test]
    fn empty_prompt_and_bad_token_rejected() {
        let w = model(1, 1);
        assert!(prefill_baseline(&w, &[], StorageDtype::F64).is_err());
        assert!(prefill_baseline(&w, &[64], StorageDtype::F64).is_err());
        let (_, mut cache) = prefill_baseline(&w, &[1, 2], StorageDtype::F64).unwrap();
        assert!(decode_step_baseline(&w, &mut cache, 99).is_err());
        let mut empty = BaselineKvCache::new(1, StorageDtype::F64);
        assert!(decode_step_baseline(&w, &mut empty, 1).is_err());
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let a = greedy_generate(&model(2, 5), &[1, 2, 3], 16, StorageDtype::F16).unwrap();
        let b = greedy_generate(&model(2, 5), &[1, 2, 3], 16, StorageDtype::F16).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[1.0; 3]), 0);
    }

    #[test]
    fn storage_rounding_only_perturbs_decode() {
        let w = model(2, 3);
        let prompt = [5u32, 9, 11, 2];
        let (l64, mut c64) = prefill_baseline(&w, &prompt, StorageDtype::F64).unwrap();
        let (l16, mut c16) = prefill_baseline(&w, &prompt, StorageDtype::F16).unwrap();
        assert_eq!(l64, l16);
        let a = decode_step_baseline(&w, &mut c64, 7).unwrap();
        let b = decode_step_baseline(&w, &mut c16, 7).unwrap();
        let e = rel_err(&b, &a);
        assert!(e > 0.0 && e < 1e-2, "{e}");
    }
}
