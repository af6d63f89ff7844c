//! Named-tensor binary container and the model configuration file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSKV" | version: u32 = 1 | header_len: u64 | header: UTF-8 JSON, header_len bytes
//! | zero padding up to the next 64-byte file offset
//! | data region: tensors in header order, each starting at a 64-byte aligned
//!   offset (relative to the data region start), zero padded in between
//! ```
//!
//! The header is a JSON array of [`TensorMeta`]. Values are IEEE-754 little
//! endian; `u4` tensors hold packed 4-bit codes, low nibble first.

use std::fs;
use std::path::Path;

use half::f16;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"CSKV";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    /// Packed unsigned 4-bit codes (quantized latents only).
    U4,
}

impl Dtype {
    pub fn nbytes(self, elements: usize) -> usize {
        match self {
            Self::F32 => elements * 4,
            Self::F16 => elements * 2,
            Self::U4 => elements.div_ceil(2),
        }
    }
}

/// Quantization parameters attached to a `u4` codes tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub bits: u8,
    pub axis: String,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantMeta>,
}

impl TensorMeta {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A tensor as held in memory: compute-precision values plus its storage
/// dtype and logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub quant: Option<QuantMeta>,
}

impl Tensor {
    pub fn from_matrix(m: &Matrix, dtype: Dtype) -> Self {
        Self {
            dtype,
            shape: vec![m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
            quant: None,
        }
    }

    pub fn vector(values: Vec<f64>, dtype: Dtype) -> Self {
        Self {
            dtype,
            shape: vec![values.len()],
            values,
            quant: None,
        }
    }

    /// 2-D view; 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [n] => Matrix::from_vec(1, *n, self.values.clone()),
            [r, c] => Matrix::from_vec(*r, *c, self.values.clone()),
            other => Err(CskvError::shape(
                "Tensor::to_matrix",
                format!("tensor of rank {} is not a matrix", other.len()),
            )),
        }
    }
}

pub type TensorMap = IndexMap<String, Tensor>;

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn encode_values(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    match t.dtype {
        Dtype::F32 => {
            for v in &t.values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F16 => {
            for v in &t.values {
                out.extend_from_slice(&f16::from_f64(*v).to_le_bytes());
            }
        }
        Dtype::U4 => {
            for pair in t.values.chunks(2) {
                let lo = u4_code(pair[0])?;
                let hi = pair.get(1).map(|v| u4_code(*v)).transpose()?.unwrap_or(0);
                out.push(lo | (hi << 4));
            }
        }
    }
    Ok(())
}

fn u4_code(v: f64) -> Result<u8> {
    if v.fract() != 0.0 || !(0.0..=15.0).contains(&v) {
        return Err(CskvError::Format(format!("{v} is not a 4-bit code")));
    }
    Ok(v as u8)
}

fn decode_values(meta: &TensorMeta, bytes: &[u8]) -> Vec<f64> {
    let n = meta.elements();
    match meta.dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64())
            .collect(),
        Dtype::U4 => bytes
            .iter()
            .flat_map(|b| [(b & 0x0f) as f64, (b >> 4) as f64])
            .take(n)
            .collect(),
    }
}

/// Serializes a tensor map to the container byte layout.
pub fn encode_container(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut metas = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(CskvError::Input("tensor names must be non-empty".into()));
        }
        let elements: usize = t.shape.iter().product();
        if elements != t.values.len() {
            return Err(CskvError::shape(
                "write_container",
                format!("{name}: shape {:?} but {} values", t.shape, t.values.len()),
            ));
        }
        let nbytes = t.dtype.nbytes(elements);
        metas.push(TensorMeta {
            name: name.clone(),
            dtype: t.dtype,
            shape: t.shape.clone(),
            offset: offset as u64,
            nbytes: nbytes as u64,
            quant: t.quant.clone(),
        });
        offset = align_up(offset + nbytes);
    }
    let header = serde_json::to_vec(&metas)?;
    let data_start = align_up(PREAMBLE + header.len());

    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(data_start, 0);
    for (meta, t) in metas.iter().zip(tensors.values()) {
        out.resize(data_start + meta.offset as usize, 0);
        encode_values(t, &mut out)?;
    }
    Ok(out)
}

/// Parses and validates the header, returning metas and the data region start.
pub fn decode_header(bytes: &[u8]) -> Result<(Vec<TensorMeta>, usize)> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(CskvError::Format("bad magic (expected \"CSKV\")".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CskvError::Format(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| CskvError::Format("truncated header".into()))?;
    let metas: Vec<TensorMeta> = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CskvError::Format(format!("header is not valid JSON: {e}")))?;
    let data_start = align_up(header_end);

    let mut problems = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for m in &metas {
        if !seen.insert(m.name.as_str()) {
            problems.push(format!("{}: duplicate tensor name", m.name));
        }
        let expected = m.dtype.nbytes(m.elements()) as u64;
        if m.nbytes != expected {
            problems.push(format!(
                "{}: nbytes {} does not match shape {:?} x {:?} = {expected}",
                m.name, m.nbytes, m.shape, m.dtype
            ));
        }
    }
    let mut spans: Vec<(u64, u64, &str)> = metas
        .iter()
        .map(|m| (m.offset, m.offset + m.nbytes, m.name.as_str()))
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            problems.push(format!("{} overlaps {}", w[0].2, w[1].2));
        }
    }
    if !problems.is_empty() {
        return Err(CskvError::Validation(problems));
    }
    for m in &metas {
        let end = data_start as u64 + m.offset + m.nbytes;
        if end > bytes.len() as u64 {
            return Err(CskvError::Format(format!(
                "truncated data: {} needs bytes up to {end}, file has {}",
                m.name,
                bytes.len()
            )));
        }
    }
    Ok((metas, data_start))
}

pub fn decode_container(bytes: &[u8]) -> Result<TensorMap> {
    let (metas, data_start) = decode_header(bytes)?;
    let mut out = TensorMap::with_capacity(metas.len());
    for m in metas {
        let start = data_start + m.offset as usize;
        let values = decode_values(&m, &bytes[start..start + m.nbytes as usize]);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CskvError::Format(format!("{}: non-finite values", m.name)));
        }
        out.insert(
            m.name,
            Tensor {
                dtype: m.dtype,
                shape: m.shape,
                values,
                quant: m.quant,
            },
        );
    }
    Ok(out)
}

pub fn write_container(tensors: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(tensors)?;
    fs::write(path, bytes).map_err(|e| CskvError::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CskvError::io(path, e))?;
    decode_container(&bytes)
}

/// Model hyperparameters, stored as a JSON file beside the container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_model: usize,
    pub d_kv: usize,
    /// Hidden width of the MLP; defaults to `4 * d_model` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub vocab_size: usize,
    pub max_position: usize,
    pub rope_theta: f64,
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn check(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_model", self.d_model),
            ("d_kv", self.d_kv),
            ("d_ff", self.d_ff()),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CskvError::Config(format!("{name} must be >= 1")));
        }
        if self.d_kv != self.n_heads * self.d_head {
            return Err(CskvError::Config(format!(
                "d_kv {} != n_heads {} x d_head {}",
                self.d_kv, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(CskvError::Config(format!(
                "d_head {} must be even for rotary embeddings",
                self.d_head
            )));
        }
        if !(self.rope_theta > 0.0) {
            return Err(CskvError::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Every tensor name the weights container must hold, with its shape.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, dkv, dff) = (self.d_model, self.d_kv, self.d_ff());
        let mut out = vec![
            ("embed".to_string(), vec![self.vocab_size, dm]),
            ("final_norm".to_string(), vec![dm]),
            ("lm_head".to_string(), vec![dm, self.vocab_size]),
        ];
        for i in 0..self.n_layers {
            let p = format!("layers.{i}");
            out.extend([
                (format!("{p}.wq"), vec![dm, dkv]),
                (format!("{p}.wk"), vec![dm, dkv]),
                (format!("{p}.wv"), vec![dm, dkv]),
                (format!("{p}.wo"), vec![dkv, dm]),
                (format!("{p}.w_mlp_in"), vec![dm, dff]),
                (format!("{p}.w_mlp_out"), vec![dff, dm]),
                (format!("{p}.norm1"), vec![dm]),
                (format!("{p}.norm2"), vec![dm]),
            ]);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CskvError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| CskvError::io(path, e))
    }
}

/// Checks that every tensor implied by `cfg` is present with the right shape,
/// reporting all mismatches at once.
pub fn validate_config(cfg: &ModelConfig, tensors: &TensorMap) -> Result<()> {
    let mut problems = Vec::new();
    if let Err(e) = cfg.check() {
        problems.push(e.to_string());
    }
    for (name, shape) in cfg.expected_tensors() {
        match tensors.get(&name) {
            None => problems.push(format!("missing tensor {name}")),
            Some(t) if t.shape != shape => problems.push(format!(
                "{name}: expected shape {shape:?}, found {:?}",
                t.shape
            )),
            Some(_) => {}
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CskvError::Validation(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_head: 2,
            d_model: 4,
            d_kv: 4,
            d_ff: Some(8),
            vocab_size: 5,
            max_position: 16,
            rope_theta: 10_000.0,
        }
    }

    fn tiny_tensors(cfg: &ModelConfig) -> TensorMap {
        cfg.expected_tensors()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product::<usize>();
                let t = Tensor {
                    dtype: Dtype::F32,
                    shape,
                    values: (0..n).map(|i| i as f64 * 0.25).collect(),
                    quant: None,
                };
                (name, t)
            })
            .collect()
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode_container(&TensorMap::new()).unwrap();
        assert_eq!(&bytes[..4], b"CSKV");
        let (metas, start) = decode_header(&bytes).unwrap();
        assert!(metas.is_empty());
        assert_eq!(start % ALIGN, 0);
        assert!(decode_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_tensor_layout() {
        let mut map = TensorMap::new();
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        map.insert("w".into(), Tensor::from_matrix(&m, Dtype::F32));
        let bytes = encode_container(&map).unwrap();
        let (metas, start) = decode_header(&bytes).unwrap();
        assert_eq!(metas[0].nbytes, 16);
        assert_eq!(metas[0].offset, 0);
        assert_eq!(bytes.len(), start + 16);
        assert_eq!(&bytes[start..start + 4], &1.0f32.to_le_bytes());
        // header parses as plain JSON on its own
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(v[0]["name"], "w");
    }

    #[test]
    fn offsets_are_aligned() {
        let mut map = TensorMap::new();
        map.insert("a".into(), Tensor::vector(vec![1.0; 3], Dtype::F16));
        map.insert("b".into(), Tensor::vector(vec![2.0; 5], Dtype::F32));
        map.insert(
            "c".into(),
            Tensor {
                dtype: Dtype::U4,
                shape: vec![3],
                values: vec![1.0, 15.0, 7.0],
                quant: Some(QuantMeta {
                    bits: 4,
                    axis: "per_token".into(),
                    group_size: 32,
                }),
            },
        );
        let bytes = encode_container(&map).unwrap();
        let (metas, _) = decode_header(&bytes).unwrap();
        assert_eq!(
            metas.iter().map(|m| m.offset).collect::<Vec<_>>(),
            vec![0, 64, 128]
        );
        assert_eq!(metas[2].nbytes, 2);
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn corrupted_magic_and_version() {
        let mut bytes = encode_container(&tiny_tensors(&tiny_config())).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(CskvError::Format(_))));
        bytes[4] = 2;
        let err = decode_container(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }

    #[test]
    fn truncated_data_rejected() {
        let bytes = encode_container(&tiny_tensors(&tiny_config())).unwrap();
        let err = decode_container(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut Vec<TensorMeta>)) -> Vec<u8> {
        let (mut metas, start) = decode_header(bytes).unwrap();
        edit(&mut metas);
        let header = serde_json::to_vec(&metas).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&bytes[start..]);
        out
    }

    #[test]
    fn nbytes_mismatch_and_overlap_rejected() {
        let bytes = encode_container(&tiny_tensors(&tiny_config())).unwrap();
        let bad = rewrite_header(&bytes, |m| m[0].nbytes += 4);
        match decode_container(&bad) {
            Err(CskvError::Validation(p)) => assert!(p[0].contains("nbytes")),
            other => panic!("unexpected {other:?}"),
        }
        let bad = rewrite_header(&bytes, |m| m[1].offset = m[0].offset);
        match decode_container(&bad) {
            Err(CskvError::Validation(p)) => assert!(p.iter().any(|s| s.contains("overlaps"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_name_rejected() {
        let mut map = TensorMap::new();
        map.insert(String::new(), Tensor::vector(vec![1.0], Dtype::F32));
        assert!(encode_container(&map).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cskv");
        let map = tiny_tensors(&tiny_config());
        write_container(&map, &path).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back, map);
        write_container(&back, dir.path().join("w2.cskv")).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("w2.cskv")).unwrap()
        );
    }

    #[test]
    fn validate_config_cases() {
        let cfg = tiny_config();
        let mut map = tiny_tensors(&cfg);
        validate_config(&cfg, &map).unwrap();

        map.shift_remove("layers.0.wk");
        map.get_mut("layers.0.wq").unwrap().shape = vec![4, 3];
        match validate_config(&cfg, &map) {
            Err(CskvError::Validation(p)) => {
                assert!(p.iter().any(|s| s.contains("layers.0.wk")));
                assert!(p.iter().any(|s| s.contains("layers.0.wq")
                    && s.contains("[4, 4]")
                    && s.contains("[4, 3]")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_invariants() {
        let mut cfg = tiny_config();
        cfg.d_kv = 5;
        assert!(cfg.check().is_err());
        let mut cfg = tiny_config();
        cfg.d_head = 3;
        cfg.d_kv = 6;
        assert!(cfg.check().is_err());
        let json = serde_json::to_string(&tiny_config()).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tiny_config());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_read_write_is_byte_stable(
            vals in prop::collection::vec(-1e4f64..1e4, 1..40),
            half_precision in any::<bool>(),
        ) {
            let dtype = if half_precision { Dtype::F16 } else { Dtype::F32 };
            let mut map = TensorMap::new();
            map.insert("x".into(), Tensor::vector(vals.clone(), dtype));
            map.insert("y".into(), Tensor::vector(vals.iter().map(|v| v * 0.5).collect(), Dtype::F32));
            let first = encode_container(&map).unwrap();
            let back = decode_container(&first).unwrap();
            for (orig, got) in vals.iter().zip(&back["x"].values) {
                let cast = if half_precision { f16::from_f64(*orig).to_f64() } else { *orig as f32 as f64 };
                prop_assert_eq!(cast, *got);
            }
            prop_assert_eq!(encode_container(&back).unwrap(), first);
        }
    }
}
