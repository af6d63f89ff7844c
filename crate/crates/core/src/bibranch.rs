//! Bi-branch KV cache: compressed latents for every token plus the most
//! recent `m` tokens at full width.
//!
//! During decode, keys and values of tokens that have left the window are
//! reconstructed as `latent · B` (keys are then rotated by their absolute
//! positions) and attended together with the window rows in position order.
//! With quantization enabled, latents are quantized in complete blocks of
//! `group_size` tokens; the newest partial block stays at storage precision.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};
use crate::lowrank::{CompressionPlan, ModelFactors, Target};
use crate::numerics::{matmul, vec_matmul, Matrix, StorageDtype};
use crate::quant::{dequantize, quantize, KvQuantSpec, QuantSpec, QuantizedTensor};
use crate::tensorio::ModelConfig;
use crate::transformer::{
    attend_rows, decode_step_with, prefill_with, stored, stored_row, KvCache, LayerPrefill,
    LayerStep, Rope, StepOutput, TransformerWeights,
};

/// Byte accounting of a cache against the uncompressed layout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub tokens: usize,
    /// Latent payload: packed codes when quantized, plain elements otherwise.
    pub bytes_latent: usize,
    /// fp16 scale + zero per quantization group.
    pub bytes_overhead: usize,
    pub bytes_window: usize,
    pub bytes_total: usize,
    pub baseline_bytes: usize,
    /// `1 − bytes_total / baseline_bytes`.
    pub achieved_ratio: f64,
    /// Same ratio without the group metadata.
    pub ratio_pre_overhead: f64,
}

fn ratio(baseline: usize, used: usize) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    (baseline as f64 - used as f64) / baseline as f64
}

impl CacheStats {
    pub(crate) fn from_parts(
        tokens: usize,
        latent: usize,
        overhead: usize,
        window: usize,
        baseline: usize,
    ) -> Self {
        let total = latent + overhead + window;
        Self {
            tokens,
            bytes_latent: latent,
            bytes_overhead: overhead,
            bytes_window: window,
            bytes_total: total,
            baseline_bytes: baseline,
            achieved_ratio: ratio(baseline, total),
            ratio_pre_overhead: ratio(baseline, latent + window),
        }
    }

    /// Combines per-layer figures.
    pub fn merge(&self, other: &CacheStats) -> CacheStats {
        Self::from_parts(
            self.tokens.max(other.tokens),
            self.bytes_latent + other.bytes_latent,
            self.bytes_overhead + other.bytes_overhead,
            self.bytes_window + other.bytes_window,
            self.baseline_bytes + other.baseline_bytes,
        )
    }
}

/// Bytes held by one layer after `n` tokens.
///
/// Latents take `n · rank · element_bytes`, or `⌈n · rank / 2⌉` bytes plus
/// 4 bytes per group when quantized. The window holds `min(n, m)` full rows
/// of keys and values.
pub fn memory_bytes(
    n: usize,
    m: usize,
    d_kv: usize,
    rank_k: usize,
    rank_v: usize,
    element_bytes: usize,
    quant: Option<&KvQuantSpec>,
) -> CacheStats {
    let (latent, overhead) = match quant {
        None => (n * (rank_k + rank_v) * element_bytes, 0),
        Some(q) => {
            let codes = (n * rank_k).div_ceil(2) + (n * rank_v).div_ceil(2);
            let groups = q.key.n_groups(n, rank_k) + q.value.n_groups(n, rank_v);
            (codes, 4 * groups)
        }
    };
    let window = n.min(m) * 2 * d_kv * element_bytes;
    CacheStats::from_parts(n, latent, overhead, window, n * 2 * d_kv * element_bytes)
}

/// [`memory_bytes`] summed over the layers of a plan.
pub fn plan_memory_bytes(cfg: &ModelConfig, plan: &CompressionPlan, n: usize) -> CacheStats {
    plan.rank_k
        .iter()
        .zip(&plan.rank_v)
        .map(|(rk, rv)| {
            memory_bytes(
                n,
                plan.window,
                cfg.d_kv,
                *rk,
                *rv,
                plan.storage.bytes(),
                plan.quant.as_ref(),
            )
        })
        .fold(CacheStats::default(), |acc, s| acc.merge(&s))
}

/// Latent rows of one layer and target, as the attention path reads them.
#[derive(Debug, Clone)]
struct LatentStore {
    storage: StorageDtype,
    quant: Option<QuantSpec>,
    block: usize,
    /// Readable view: dequantized rows for completed blocks, storage-rounded
    /// rows for the residual.
    rows: Matrix,
    blocks: Vec<QuantizedTensor>,
    quantized: usize,
}

impl LatentStore {
    fn new(storage: StorageDtype, quant: Option<QuantSpec>, block: usize) -> Self {
        Self {
            storage,
            quant,
            block,
            rows: Matrix::zeros(0, 0),
            blocks: Vec::new(),
            quantized: 0,
        }
    }

    /// Appends a row; returns the first row whose readable value changed
    /// when a block was quantized.
    fn push(&mut self, row: &[f64]) -> Option<usize> {
        self.rows.push_row(&stored_row(row, self.storage));
        let spec = self.quant?;
        if self.rows.rows() - self.quantized < self.block {
            return None;
        }
        let start = self.quantized;
        let q = quantize(&self.rows.slice_rows(start, start + self.block), &spec);
        let dq = dequantize(&q);
        for r in 0..self.block {
            self.rows.row_mut(start + r).copy_from_slice(dq.row(r));
        }
        self.blocks.push(q);
        self.quantized += self.block;
        Some(start)
    }

    fn len(&self) -> usize {
        self.rows.rows()
    }

    /// `(payload, overhead)` bytes.
    fn bytes(&self) -> (usize, usize) {
        let residual = (self.len() - self.quantized) * self.rows.cols() * self.storage.bytes();
        let codes: usize = self.blocks.iter().map(|b| b.codes.len()).sum();
        let groups: usize = self.blocks.iter().map(|b| b.scales.len()).sum();
        (codes + residual, 4 * groups)
    }
}

/// Reconstructed history rows, extended lazily and invalidated when a
/// quantized block rewrites latent rows.
#[derive(Debug, Clone, Default)]
struct History {
    rows: Matrix,
}

impl History {
    fn invalidate_from(&mut self, start: usize) {
        if self.rows.rows() > start {
            self.rows = self.rows.slice_rows(0, start);
        }
    }

    fn extend_to(&mut self, upto: usize, latent: &Matrix, b: &Matrix) {
        for r in self.rows.rows()..upto {
            self.rows.push_row(&vec_matmul(latent.row(r), b));
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    latent_k: LatentStore,
    latent_v: LatentStore,
    window_k: VecDeque<Vec<f64>>,
    window_v: VecDeque<Vec<f64>>,
    window_pos: VecDeque<usize>,
    hist_k: History,
    hist_v: History,
}

/// Per-session bi-branch cache over shared factors.
#[derive(Debug, Clone)]
pub struct BiBranchCache<'f> {
    factors: &'f ModelFactors,
    plan: CompressionPlan,
    d_kv: usize,
    layers: Vec<LayerCache>,
    n: usize,
}

impl<'f> BiBranchCache<'f> {
    pub fn new(
        cfg: &ModelConfig,
        factors: &'f ModelFactors,
        plan: &CompressionPlan,
    ) -> Result<Self> {
        plan.check(cfg)?;
        factors.check(cfg, plan)?;
        let (qk, qv, block) = match plan.quant {
            Some(KvQuantSpec { key, value }) => (Some(key), Some(value), key.group_size),
            None => (None, None, 0),
        };
        let layer = LayerCache {
            latent_k: LatentStore::new(plan.storage, qk, block),
            latent_v: LatentStore::new(plan.storage, qv, block),
            window_k: VecDeque::new(),
            window_v: VecDeque::new(),
            window_pos: VecDeque::new(),
            hist_k: History::default(),
            hist_v: History::default(),
        };
        Ok(Self {
            factors,
            plan: plan.clone(),
            d_kv: cfg.d_kv,
            layers: vec![layer; cfg.n_layers],
            n: 0,
        })
    }

    pub fn factors(&self) -> &'f ModelFactors {
        self.factors
    }

    pub fn plan(&self) -> &CompressionPlan {
        &self.plan
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Readable key and value latents of `layer` (`n × rank`).
    pub fn latents(&self, layer: usize) -> (&Matrix, &Matrix) {
        let l = &self.layers[layer];
        (&l.latent_k.rows, &l.latent_v.rows)
    }

    /// Window rows of `layer` as `(keys, values, positions)`.
    pub fn window(&self, layer: usize) -> (Matrix, Matrix, Vec<usize>) {
        let l = &self.layers[layer];
        let to_matrix = |rows: &VecDeque<Vec<f64>>| {
            let mut m = Matrix::zeros(0, 0);
            rows.iter().for_each(|r| m.push_row(r));
            m
        };
        (
            to_matrix(&l.window_k),
            to_matrix(&l.window_v),
            l.window_pos.iter().copied().collect(),
        )
    }

    pub fn window_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.window_pos.len())
    }

    /// Quantized latent blocks of `layer` for `target`.
    pub fn quantized_blocks(&self, layer: usize, target: Target) -> &[QuantizedTensor] {
        let l = &self.layers[layer];
        match target {
            Target::Key => &l.latent_k.blocks,
            Target::Value => &l.latent_v.blocks,
        }
    }

    /// Actual bytes held, summed over layers.
    pub fn stats(&self) -> CacheStats {
        let eb = self.plan.storage.bytes();
        self.layers
            .iter()
            .map(|l| {
                let (pk, ok) = l.latent_k.bytes();
                let (pv, ov) = l.latent_v.bytes();
                let window = l.window_pos.len() * 2 * self.d_kv * eb;
                CacheStats::from_parts(
                    self.n,
                    pk + pv,
                    ok + ov,
                    window,
                    self.n * 2 * self.d_kv * eb,
                )
            })
            .fold(CacheStats::default(), |acc, s| acc.merge(&s))
    }

    fn push_window(&mut self, layer: usize, key: &[f64], value: &[f64], position: usize) {
        let dtype = self.plan.storage;
        let l = &mut self.layers[layer];
        l.window_k.push_back(stored_row(key, dtype));
        l.window_v.push_back(stored_row(value, dtype));
        l.window_pos.push_back(position);
    }

    fn evict(&mut self, layer: usize) {
        let m = self.plan.window;
        let l = &mut self.layers[layer];
        while l.window_pos.len() > m {
            l.window_k.pop_front();
            l.window_v.pop_front();
            l.window_pos.pop_front();
        }
    }

    fn push_latents(&mut self, layer: usize, lk: &[f64], lv: &[f64]) {
        let l = &mut self.layers[layer];
        if let Some(start) = l.latent_k.push(lk) {
            l.hist_k.invalidate_from(start);
        }
        if let Some(start) = l.latent_v.push(lv) {
            l.hist_v.invalidate_from(start);
        }
    }
}

impl KvCache for BiBranchCache<'_> {
    fn tokens_seen(&self) -> usize {
        self.n
    }

    fn advance(&mut self, n: usize) {
        self.n += n;
    }

    fn ingest_prefill(&mut self, layer: usize, io: &LayerPrefill<'_>) -> Result<()> {
        let f = &self.factors.layers[layer];
        let lk = matmul(io.hidden, &f.key.a)?;
        let lv = matmul(io.hidden, &f.value.a)?;
        for r in 0..lk.rows() {
            self.push_latents(layer, lk.row(r), lv.row(r));
        }
        let n = io.keys.rows();
        for r in n.saturating_sub(self.plan.window)..n {
            self.push_window(layer, io.keys.row(r), io.values.row(r), r);
        }
        Ok(())
    }

    fn attend(&mut self, layer: usize, step: &LayerStep<'_>, rope: &Rope) -> Result<Vec<f64>> {
        let factors = self.factors;
        let f = &factors.layers[layer];
        let lk = vec_matmul(step.hidden, &f.key.a);
        let lv = vec_matmul(step.hidden, &f.value.a);
        self.push_latents(layer, &lk, &lv);
        self.push_window(layer, step.key, step.value, step.position);

        let l = &mut self.layers[layer];
        let hist = l.latent_k.len() - l.window_pos.len();
        l.hist_k.extend_to(hist, &l.latent_k.rows, &f.key.b);
        l.hist_v.extend_to(hist, &l.latent_v.rows, &f.value.b);
        let total = hist + l.window_pos.len();
        let mut keys = Matrix::zeros(0, 0);
        let mut values = Matrix::zeros(0, 0);
        let mut positions = Vec::with_capacity(total);
        for r in 0..hist {
            keys.push_row(l.hist_k.rows.row(r));
            values.push_row(l.hist_v.rows.row(r));
            positions.push(r);
        }
        for ((k, v), p) in l.window_k.iter().zip(&l.window_v).zip(&l.window_pos) {
            keys.push_row(k);
            values.push_row(v);
            positions.push(*p);
        }
        let (out, _) = attend_rows(step.query, step.position, &keys, &positions, &values, rope)?;
        self.evict(layer);
        Ok(out)
    }
}

/// Full-precision prefill that fills a fresh bi-branch cache.
pub fn prefill<'f>(
    weights: &TransformerWeights,
    factors: &'f ModelFactors,
    plan: &CompressionPlan,
    tokens: &[u32],
) -> Result<(Matrix, BiBranchCache<'f>)> {
    let mut cache = BiBranchCache::new(&weights.config, factors, plan)?;
    let out = prefill_with(weights, &mut cache, tokens)?;
    Ok((out.logits, cache))
}

pub fn decode_step(
    weights: &TransformerWeights,
    cache: &mut BiBranchCache<'_>,
    token: u32,
) -> Result<StepOutput> {
    decode_step_with(weights, cache, token)
}

/// `latent[0..upto] · B` for keys and values of `layer` (keys unrotated).
pub fn reconstruct_history(
    cache: &BiBranchCache<'_>,
    layer: usize,
    upto: usize,
) -> Result<(Matrix, Matrix)> {
    let limit = cache.len() - cache.layers[layer].window_pos.len();
    if upto > limit {
        return Err(CskvError::Input(format!(
            "history covers {limit} rows outside the window, asked for {upto}"
        )));
    }
    let f = &cache.factors.layers[layer];
    let (lk, lv) = cache.latents(layer);
    if upto == 0 {
        return Ok((
            Matrix::zeros(0, f.key.h_out()),
            Matrix::zeros(0, f.value.h_out()),
        ));
    }
    Ok((
        matmul(&lk.slice_rows(0, upto), &f.key.b)?,
        matmul(&lv.slice_rows(0, upto), &f.value.b)?,
    ))
}

/// The readable latent matrix a cache would hold for `x · a` at the given
/// storage and quantization settings.
pub fn stored_latents(
    x: &Matrix,
    a: &Matrix,
    storage: StorageDtype,
    quant: Option<QuantSpec>,
) -> Result<Matrix> {
    let latent = matmul(x, a)?;
    let Some(spec) = quant else {
        return Ok(stored(&latent, storage));
    };
    let mut store = LatentStore::new(storage, Some(spec), spec.group_size);
    for r in 0..latent.rows() {
        store.push(latent.row(r));
    }
    Ok(store.rows)
}
