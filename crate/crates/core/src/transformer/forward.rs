use crate::error::{CskvError, Result};
use crate::numerics::{matmul, vec_matmul, Matrix, StorageDtype};

use super::ops::{attention_prefix, attention_with_probs, rmsnorm, silu, Rope};
use super::weights::{LayerWeights, TransformerWeights};

/// What one layer produced during a full-precision prefill.
pub struct LayerPrefill<'a> {
    /// Post-norm hidden states fed to the K/V projections (`n × d_model`).
    pub hidden: &'a Matrix,
    /// Pre-rotation keys `hidden · W_K`.
    pub keys: &'a Matrix,
    pub values: &'a Matrix,
    /// Per key position, attention mass received summed over queries and
    /// averaged over heads. Only computed when the cache asks for it.
    pub attention_mass: Option<&'a [f64]>,
}

/// One layer's view of the token being decoded.
pub struct LayerStep<'a> {
    pub position: usize,
    pub hidden: &'a [f64],
    /// Pre-rotation query, key and value rows.
    pub query: &'a [f64],
    pub key: &'a [f64],
    pub value: &'a [f64],
}

/// A per-session KV store. Implementations decide what is kept and how the
/// attention keys/values for a decode step are assembled.
pub trait KvCache {
    /// Tokens consumed so far (the next token's absolute position).
    fn tokens_seen(&self) -> usize;

    fn advance(&mut self, n: usize);

    fn wants_prefill_attention(&self) -> bool {
        false
    }

    fn ingest_prefill(&mut self, layer: usize, io: &LayerPrefill<'_>) -> Result<()>;

    /// Stores the step's key/value and returns the attention output.
    fn attend(&mut self, layer: usize, step: &LayerStep<'_>, rope: &Rope) -> Result<Vec<f64>>;
}

/// Rotates pre-rotation key rows by their absolute positions and attends.
pub fn attend_rows(
    query: &[f64],
    position: usize,
    keys: &Matrix,
    key_positions: &[usize],
    values: &Matrix,
    rope: &Rope,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    debug_assert_eq!(keys.rows(), key_positions.len());
    let mut rotated = keys.clone();
    for (r, p) in key_positions.iter().enumerate() {
        rope.rotate_in_place(rotated.row_mut(r), *p);
    }
    let q = rope.rotate(query, position);
    attention_with_probs(&q, &rotated, values, rope.n_heads)
}

pub struct PrefillOutput {
    /// `n × vocab` logits, one row per prompt position.
    pub logits: Matrix,
    /// Per layer: post-norm inputs to the K/V projections.
    pub layer_inputs: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

pub struct StepOutput {
    pub logits: Vec<f64>,
    /// Per layer attention output (before `W_O`).
    pub attn_outputs: Vec<Vec<f64>>,
}

fn mlp(layer: &LayerWeights, x: &[f64]) -> Vec<f64> {
    let h = rmsnorm(x, &layer.norm2);
    let act: Vec<f64> = vec_matmul(&h, &layer.w_mlp_in)
        .into_iter()
        .map(silu)
        .collect();
    vec_matmul(&act, &layer.w_mlp_out)
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

fn head(weights: &TransformerWeights, x: &[f64]) -> Vec<f64> {
    vec_matmul(&rmsnorm(x, &weights.final_norm), &weights.lm_head)
}

/// Full-precision causal prefill of `tokens`, handing each layer's
/// projections to `cache`.
pub fn prefill_with<C: KvCache + ?Sized>(
    weights: &TransformerWeights,
    cache: &mut C,
    tokens: &[u32],
) -> Result<PrefillOutput> {
    if tokens.is_empty() {
        return Err(CskvError::Input("empty prompt".into()));
    }
    if cache.tokens_seen() != 0 {
        return Err(CskvError::Input("prefill requires an empty cache".into()));
    }
    for t in tokens {
        weights.check_token(*t)?;
    }
    let cfg = &weights.config;
    let rope = weights.rope();
    let n = tokens.len();
    let mut x = Matrix::from_fn(n, cfg.d_model, |r, c| {
        weights.embed.get(tokens[r] as usize, c)
    });
    let mut out = PrefillOutput {
        logits: Matrix::zeros(n, cfg.vocab_size),
        layer_inputs: Vec::with_capacity(cfg.n_layers),
        keys: Vec::with_capacity(cfg.n_layers),
        values: Vec::with_capacity(cfg.n_layers),
    };
    let want_mass = cache.wants_prefill_attention();
    for (li, layer) in weights.layers.iter().enumerate() {
        let mut hidden = Matrix::zeros(n, cfg.d_model);
        for r in 0..n {
            hidden
                .row_mut(r)
                .copy_from_slice(&rmsnorm(x.row(r), &layer.norm1));
        }
        let q = matmul(&hidden, &layer.wq)?;
        let k = matmul(&hidden, &layer.wk)?;
        let v = matmul(&hidden, &layer.wv)?;
        let mut k_rot = k.clone();
        for r in 0..n {
            rope.rotate_in_place(k_rot.row_mut(r), r);
        }
        let mut mass = vec![0.0; n];
        for i in 0..n {
            let qi = rope.rotate(q.row(i), i);
            let (attn, probs) = attention_prefix(&qi, &k_rot, &v, i + 1, rope.n_heads)?;
            if want_mass {
                for head_probs in &probs {
                    for (m, p) in mass.iter_mut().zip(head_probs) {
                        *m += p / rope.n_heads as f64;
                    }
                }
            }
            let proj = vec_matmul(&attn, &layer.wo);
            add_into(x.row_mut(i), &proj);
            let m = mlp(layer, x.row(i));
            add_into(x.row_mut(i), &m);
        }
        cache.ingest_prefill(
            li,
            &LayerPrefill {
                hidden: &hidden,
                keys: &k,
                values: &v,
                attention_mass: want_mass.then_some(mass.as_slice()),
            },
        )?;
        out.layer_inputs.push(hidden);
        out.keys.push(k);
        out.values.push(v);
    }
    for r in 0..n {
        out.logits
            .row_mut(r)
            .copy_from_slice(&head(weights, x.row(r)));
    }
    cache.advance(n);
    Ok(out)
}

/// One decode step for `token` at position `cache.tokens_seen()`.
pub fn decode_step_with<C: KvCache + ?Sized>(
    weights: &TransformerWeights,
    cache: &mut C,
    token: u32,
) -> Result<StepOutput> {
    weights.check_token(token)?;
    if cache.tokens_seen() == 0 {
        return Err(CskvError::Input("decode step on an empty cache".into()));
    }
    let position = cache.tokens_seen();
    if position >= weights.config.max_position {
        return Err(CskvError::Input(format!(
            "position {position} exceeds max_position {}",
            weights.config.max_position
        )));
    }
    let rope = weights.rope();
    let mut x = weights.embed.row(token as usize).to_vec();
    let mut attn_outputs = Vec::with_capacity(weights.layers.len());
    for (li, layer) in weights.layers.iter().enumerate() {
        let hidden = rmsnorm(&x, &layer.norm1);
        let q = vec_matmul(&hidden, &layer.wq);
        let k = vec_matmul(&hidden, &layer.wk);
        let v = vec_matmul(&hidden, &layer.wv);
        let attn = cache.attend(
            li,
            &LayerStep {
                position,
                hidden: &hidden,
                query: &q,
                key: &k,
                value: &v,
            },
            &rope,
        )?;
        add_into(&mut x, &vec_matmul(&attn, &layer.wo));
        let m = mlp(layer, &x);
        add_into(&mut x, &m);
        attn_outputs.push(attn);
    }
    cache.advance(1);
    Ok(StepOutput {
        logits: head(weights, &x),
        attn_outputs,
    })
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of `prompt` through an arbitrary cache.
pub fn generate_with<C: KvCache + ?Sized>(
    weights: &TransformerWeights,
    cache: &mut C,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    let pre = prefill_with(weights, cache, prompt)?;
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let mut next = argmax(pre.logits.row(pre.logits.rows() - 1));
    out.push(next);
    while out.len() < max_new {
        let step = decode_step_with(weights, cache, next)?;
        next = argmax(&step.logits);
        out.push(next);
    }
    Ok(out)
}

/// Uncompressed reference cache: every token's pre-rotation K and V rows.
#[derive(Debug, Clone)]
pub struct BaselineKvCache {
    pub dtype: StorageDtype,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    n: usize,
}

impl BaselineKvCache {
    pub fn new(n_layers: usize, dtype: StorageDtype) -> Self {
        Self {
            dtype,
            keys: vec![Matrix::zeros(0, 0); n_layers],
            values: vec![Matrix::zeros(0, 0); n_layers],
            n: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

pub(crate) fn stored(m: &Matrix, dtype: StorageDtype) -> Matrix {
    match dtype {
        StorageDtype::F64 => m.clone(),
        d => m.map(|v| d.round(v)),
    }
}

pub(crate) fn stored_row(row: &[f64], dtype: StorageDtype) -> Vec<f64> {
    let mut r = row.to_vec();
    dtype.round_slice(&mut r);
    r
}

impl KvCache for BaselineKvCache {
    fn tokens_seen(&self) -> usize {
        self.n
    }

    fn advance(&mut self, n: usize) {
        self.n += n;
    }

    fn ingest_prefill(&mut self, layer: usize, io: &LayerPrefill<'_>) -> Result<()> {
        self.keys[layer] = stored(io.keys, self.dtype);
        self.values[layer] = stored(io.values, self.dtype);
        Ok(())
    }

    fn attend(&mut self, layer: usize, step: &LayerStep<'_>, rope: &Rope) -> Result<Vec<f64>> {
        self.keys[layer].push_row(&stored_row(step.key, self.dtype));
        self.values[layer].push_row(&stored_row(step.value, self.dtype));
        let positions: Vec<usize> = (0..self.keys[layer].rows()).collect();
        let (out, _) = attend_rows(
            step.query,
            step.position,
            &self.keys[layer],
            &positions,
            &self.values[layer],
            rope,
        )?;
        Ok(out)
    }
}

pub fn prefill_baseline(
    weights: &TransformerWeights,
    tokens: &[u32],
    dtype: StorageDtype,
) -> Result<(Matrix, BaselineKvCache)> {
    let mut cache = BaselineKvCache::new(weights.config.n_layers, dtype);
    let out = prefill_with(weights, &mut cache, tokens)?;
    Ok((out.logits, cache))
}

pub fn decode_step_baseline(
    weights: &TransformerWeights,
    cache: &mut BaselineKvCache,
    token: u32,
) -> Result<Vec<f64>> {
    decode_step_with(weights, cache, token).map(|s| s.logits)
}

pub fn greedy_generate(
    weights: &TransformerWeights,
    prompt: &[u32],
    max_new: usize,
    dtype: StorageDtype,
) -> Result<Vec<u32>> {
    let mut cache = BaselineKvCache::new(weights.config.n_layers, dtype);
    generate_with(weights, &mut cache, prompt, max_new)
}
