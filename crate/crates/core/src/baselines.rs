//! Token-pruning comparators: attention-sink streaming and heavy-hitter
//! (cumulative attention) eviction.
//!
//! Both keep full-width rows for a subset of tokens and attend only over
//! that subset, with RoPE applied at each token's absolute position. Prefill
//! runs full attention; pruning starts from the prefill's result.

use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};
use crate::numerics::{Matrix, StorageDtype};
use crate::transformer::{
    attend_rows, generate_with, stored_row, KvCache, LayerPrefill, LayerStep, Rope,
    TransformerWeights,
};

/// Default attention-sink count.
pub const DEFAULT_SINKS: usize = 4;

/// Positions kept by a sink + recency policy after `n` tokens.
pub fn streaming_kept(sinks: usize, window: usize, n: usize) -> Vec<usize> {
    if n <= sinks + window {
        return (0..n).collect();
    }
    (0..sinks).chain(n - window..n).collect()
}

/// Kept positions of a sink + recency policy, maintained incrementally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamingPolicy {
    pub sinks: usize,
    pub window: usize,
    pub kept: Vec<usize>,
}

impl StreamingPolicy {
    pub fn new(sinks: usize, window: usize) -> Self {
        Self {
            sinks,
            window,
            kept: Vec::new(),
        }
    }

    /// Appends `position`; returns the index (into `kept`) evicted, if any.
    pub fn append(&mut self, position: usize) -> Option<usize> {
        self.kept.push(position);
        if self.kept.len() > self.sinks + self.window {
            // oldest non-sink token
            let idx = self.sinks;
            self.kept.remove(idx);
            return Some(idx);
        }
        None
    }
}

/// Cumulative-attention eviction with a protected recency reserve.
#[derive(Debug, Clone, PartialEq)]
pub struct H2oPolicy {
    pub budget: usize,
    pub reserve: usize,
    pub kept: Vec<usize>,
    pub scores: Vec<f64>,
}

impl H2oPolicy {
    /// Budget `b` tokens, of which the newest `b/2` are never evicted.
    pub fn new(budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(CskvError::Config("H2O budget must be >= 1".into()));
        }
        Ok(Self {
            budget,
            reserve: budget / 2,
            kept: Vec::new(),
            scores: Vec::new(),
        })
    }

    pub fn append(&mut self, position: usize) {
        self.kept.push(position);
        self.scores.push(0.0);
    }

    /// Adds one step's attention weights (aligned with `kept`) to the scores.
    pub fn accumulate(&mut self, attention: &[f64]) {
        debug_assert_eq!(attention.len(), self.kept.len());
        self.scores
            .iter_mut()
            .zip(attention)
            .for_each(|(s, a)| *s += a);
    }

    /// Evicts minimum-score tokens outside the reserve until within budget;
    /// ties go to the older token. Returns evicted indices in eviction order.
    pub fn evict(&mut self) -> Vec<usize> {
        let mut out = Vec::new();
        while self.kept.len() > self.budget {
            let candidates = self.kept.len() - self.reserve;
            let mut idx = 0;
            for i in 1..candidates {
                if self.scores[i] < self.scores[idx] {
                    idx = i;
                }
            }
            self.kept.remove(idx);
            self.scores.remove(idx);
            out.push(idx);
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
struct Rows {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl Rows {
    fn push(&mut self, k: &[f64], v: &[f64], dtype: StorageDtype) {
        self.keys.push(stored_row(k, dtype));
        self.values.push(stored_row(v, dtype));
    }

    fn remove(&mut self, idx: usize) {
        self.keys.remove(idx);
        self.values.remove(idx);
    }

    fn matrices(&self) -> (Matrix, Matrix) {
        let mut k = Matrix::zeros(0, 0);
        let mut v = Matrix::zeros(0, 0);
        for (kr, vr) in self.keys.iter().zip(&self.values) {
            k.push_row(kr);
            v.push_row(vr);
        }
        (k, v)
    }
}

/// Sink + recency cache.
#[derive(Debug, Clone)]
pub struct StreamingCache {
    pub dtype: StorageDtype,
    policy: Vec<StreamingPolicy>,
    rows: Vec<Rows>,
    n: usize,
}

impl StreamingCache {
    pub fn new(n_layers: usize, sinks: usize, window: usize, dtype: StorageDtype) -> Self {
        Self {
            dtype,
            policy: vec![StreamingPolicy::new(sinks, window); n_layers],
            rows: vec![Rows::default(); n_layers],
            n: 0,
        }
    }

    /// `min(DEFAULT_SINKS, budget)` sinks, the rest recency window.
    pub fn with_budget(n_layers: usize, budget: usize, dtype: StorageDtype) -> Self {
        let sinks = DEFAULT_SINKS.min(budget);
        Self::new(n_layers, sinks, budget - sinks, dtype)
    }

    pub fn kept_positions(&self, layer: usize) -> &[usize] {
        &self.policy[layer].kept
    }
}

impl KvCache for StreamingCache {
    fn tokens_seen(&self) -> usize {
        self.n
    }

    fn advance(&mut self, n: usize) {
        self.n += n;
    }

    fn ingest_prefill(&mut self, layer: usize, io: &LayerPrefill<'_>) -> Result<()> {
        for r in 0..io.keys.rows() {
            self.rows[layer].push(io.keys.row(r), io.values.row(r), self.dtype);
            if let Some(idx) = self.policy[layer].append(r) {
                self.rows[layer].remove(idx);
            }
        }
        Ok(())
    }

    fn attend(&mut self, layer: usize, step: &LayerStep<'_>, rope: &Rope) -> Result<Vec<f64>> {
        self.rows[layer].push(step.key, step.value, self.dtype);
        if let Some(idx) = self.policy[layer].append(step.position) {
            self.rows[layer].remove(idx);
        }
        let (k, v) = self.rows[layer].matrices();
        let (out, _) = attend_rows(
            step.query,
            step.position,
            &k,
            &self.policy[layer].kept,
            &v,
            rope,
        )?;
        Ok(out)
    }
}

/// Heavy-hitter cache; scores are tracked per layer.
#[derive(Debug, Clone)]
pub struct H2oCache {
    pub dtype: StorageDtype,
    policy: Vec<H2oPolicy>,
    rows: Vec<Rows>,
    n: usize,
}

impl H2oCache {
    pub fn new(n_layers: usize, budget: usize, dtype: StorageDtype) -> Result<Self> {
        Ok(Self {
            dtype,
            policy: vec![H2oPolicy::new(budget)?; n_layers],
            rows: vec![Rows::default(); n_layers],
            n: 0,
        })
    }

    pub fn kept_positions(&self, layer: usize) -> &[usize] {
        &self.policy[layer].kept
    }

    pub fn scores(&self, layer: usize) -> &[f64] {
        &self.policy[layer].scores
    }

    fn evict(&mut self, layer: usize) {
        for idx in self.policy[layer].evict() {
            self.rows[layer].remove(idx);
        }
    }
}

fn head_mean(probs: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; probs[0].len()];
    for p in probs {
        mean.iter_mut()
            .zip(p)
            .for_each(|(m, v)| *m += v / probs.len() as f64);
    }
    mean
}

impl KvCache for H2oCache {
    fn tokens_seen(&self) -> usize {
        self.n
    }

    fn advance(&mut self, n: usize) {
        self.n += n;
    }

    fn wants_prefill_attention(&self) -> bool {
        true
    }

    fn ingest_prefill(&mut self, layer: usize, io: &LayerPrefill<'_>) -> Result<()> {
        let mass = io
            .attention_mass
            .ok_or_else(|| CskvError::Input("heavy-hitter prefill needs attention mass".into()))?;
        for r in 0..io.keys.rows() {
            self.rows[layer].push(io.keys.row(r), io.values.row(r), self.dtype);
            self.policy[layer].append(r);
        }
        self.policy[layer].accumulate(mass);
        self.evict(layer);
        Ok(())
    }

    fn attend(&mut self, layer: usize, step: &LayerStep<'_>, rope: &Rope) -> Result<Vec<f64>> {
        self.rows[layer].push(step.key, step.value, self.dtype);
        self.policy[layer].append(step.position);
        let (k, v) = self.rows[layer].matrices();
        let (out, probs) = attend_rows(
            step.query,
            step.position,
            &k,
            &self.policy[layer].kept,
            &v,
            rope,
        )?;
        self.policy[layer].accumulate(&head_mean(&probs));
        self.evict(layer);
        Ok(out)
    }
}

/// Pruning policy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum PruningPolicy {
    Streaming { sinks: usize, window: usize },
    H2o { budget: usize },
}

impl PruningPolicy {
    /// Streaming policy for a total token budget, [`DEFAULT_SINKS`] sinks.
    pub fn streaming_budget(budget: usize) -> Self {
        let sinks = DEFAULT_SINKS.min(budget);
        Self::Streaming {
            sinks,
            window: budget - sinks,
        }
    }

    pub fn budget(&self) -> usize {
        match self {
            Self::Streaming { sinks, window } => sinks + window,
            Self::H2o { budget } => *budget,
        }
    }

    pub fn build(&self, n_layers: usize, dtype: StorageDtype) -> Result<Box<dyn KvCache>> {
        Ok(match *self {
            Self::Streaming { sinks, window } => {
                Box::new(StreamingCache::new(n_layers, sinks, window, dtype))
            }
            Self::H2o { budget } => Box::new(H2oCache::new(n_layers, budget, dtype)?),
        })
    }
}

/// Greedy decoding restricted to the tokens a pruning policy keeps.
pub fn decode_with_pruned_cache(
    weights: &TransformerWeights,
    policy: &PruningPolicy,
    prompt: &[u32],
    max_new: usize,
    dtype: StorageDtype,
) -> Result<Vec<u32>> {
    let mut cache = policy.build(weights.config.n_layers, dtype)?;
    generate_with(weights, cache.as_mut(), prompt, max_new)
}

/// Token budget at full width with the same bytes as a bi-branch cache of
/// `n` tokens: `round((n·(r_k + r_v) + 2·min(n, m)·d_kv) / (2·d_kv))`.
pub fn equal_budget_tokens(n: usize, m: usize, d_kv: usize, rank_k: usize, rank_v: usize) -> usize {
    let elems = n * (rank_k + rank_v) + 2 * n.min(m) * d_kv;
    let per_token = 2 * d_kv;
    ((elems + per_token / 2) / per_token).max(1)
}
