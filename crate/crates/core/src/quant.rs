//! Asymmetric 4-bit group quantization of compressed latents.
//!
//! Key latents are grouped per channel (a group runs down the token axis of
//! one channel), value latents per token (a group runs along the channels of
//! one token). Each group stores an fp16 scale and zero point. The zero is
//! rounded down and the scale rounded up to fp16 so the 16-level grid always
//! covers the group's range, which keeps every element within half a step.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};
use crate::numerics::Matrix;
use crate::tensorio::{Dtype, QuantMeta, Tensor, TensorMap};

pub const BITS: u8 = 4;
pub const LEVELS: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantAxis {
    PerChannel,
    PerToken,
}

impl QuantAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerChannel => "per_channel",
            Self::PerToken => "per_token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub axis: QuantAxis,
    pub group_size: usize,
}

impl QuantSpec {
    pub const DEFAULT_GROUP: usize = 32;

    pub fn new(axis: QuantAxis, group_size: usize) -> Result<Self> {
        let spec = Self {
            bits: BITS,
            axis,
            group_size,
        };
        spec.check()?;
        Ok(spec)
    }

    /// Per-channel spec used for key latents.
    pub fn keys() -> Self {
        Self {
            bits: BITS,
            axis: QuantAxis::PerChannel,
            group_size: Self::DEFAULT_GROUP,
        }
    }

    /// Per-token spec used for value latents.
    pub fn values() -> Self {
        Self {
            bits: BITS,
            axis: QuantAxis::PerToken,
            group_size: Self::DEFAULT_GROUP,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.bits != BITS {
            return Err(CskvError::Config(format!(
                "only 4-bit quantization is supported, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(CskvError::Config("group_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of groups for a `rows × cols` matrix.
    pub fn n_groups(&self, rows: usize, cols: usize) -> usize {
        match self.axis {
            QuantAxis::PerChannel => rows.div_ceil(self.group_size) * cols,
            QuantAxis::PerToken => rows * cols.div_ceil(self.group_size),
        }
    }

    /// Element coordinates of group `g`, in row-major order.
    pub fn group_members(&self, rows: usize, cols: usize, g: usize) -> Vec<(usize, usize)> {
        let gs = self.group_size;
        match self.axis {
            QuantAxis::PerChannel => {
                let (block, c) = (g / cols, g % cols);
                (block * gs..((block + 1) * gs).min(rows))
                    .map(|r| (r, c))
                    .collect()
            }
            QuantAxis::PerToken => {
                let nb = cols.div_ceil(gs);
                let (r, block) = (g / nb, g % nb);
                (block * gs..((block + 1) * gs).min(cols))
                    .map(|c| (r, c))
                    .collect()
            }
        }
    }

    /// Group index of element `(r, c)`.
    pub fn group_of(&self, cols: usize, r: usize, c: usize) -> usize {
        match self.axis {
            QuantAxis::PerChannel => (r / self.group_size) * cols + c,
            QuantAxis::PerToken => r * cols.div_ceil(self.group_size) + c / self.group_size,
        }
    }
}

/// Quantization applied to both latent stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvQuantSpec {
    pub key: QuantSpec,
    pub value: QuantSpec,
}

impl Default for KvQuantSpec {
    fn default() -> Self {
        Self {
            key: QuantSpec::keys(),
            value: QuantSpec::values(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub spec: QuantSpec,
    /// Row-major codes, two per byte, low nibble first.
    pub codes: Vec<u8>,
    pub scales: Vec<f16>,
    pub zeros: Vec<f16>,
}

impl QuantizedTensor {
    /// Bytes held: packed codes plus one fp16 scale and zero per group.
    pub fn nbytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }

    pub fn code(&self, r: usize, c: usize) -> u8 {
        let i = r * self.cols + c;
        let b = self.codes[i / 2];
        if i % 2 == 0 {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn scale(&self, g: usize) -> f64 {
        self.scales[g].to_f64()
    }

    pub fn zero(&self, g: usize) -> f64 {
        self.zeros[g].to_f64()
    }

    /// Container tensors `{name}.codes`, `{name}.scales`, `{name}.zeros`.
    pub fn to_tensors(&self, name: &str) -> TensorMap {
        let n = self.rows * self.cols;
        let mut out = TensorMap::new();
        out.insert(
            format!("{name}.codes"),
            Tensor {
                dtype: Dtype::U4,
                shape: vec![self.rows, self.cols],
                values: unpack_codes(&self.codes, n)
                    .into_iter()
                    .map(f64::from)
                    .collect(),
                quant: Some(QuantMeta {
                    bits: self.spec.bits,
                    axis: self.spec.axis.as_str().into(),
                    group_size: self.spec.group_size,
                }),
            },
        );
        out.insert(
            format!("{name}.scales"),
            Tensor::vector(self.scales.iter().map(|s| s.to_f64()).collect(), Dtype::F16),
        );
        out.insert(
            format!("{name}.zeros"),
            Tensor::vector(self.zeros.iter().map(|s| s.to_f64()).collect(), Dtype::F16),
        );
        out
    }

    pub fn from_tensors(name: &str, tensors: &TensorMap) -> Result<Self> {
        let get = |suffix: &str| {
            tensors
                .get(&format!("{name}.{suffix}"))
                .ok_or_else(|| CskvError::Format(format!("missing tensor {name}.{suffix}")))
        };
        let codes = get("codes")?;
        let meta = codes
            .quant
            .as_ref()
            .ok_or_else(|| CskvError::Format(format!("{name}.codes carries no quant entry")))?;
        let axis = match meta.axis.as_str() {
            "per_channel" => QuantAxis::PerChannel,
            "per_token" => QuantAxis::PerToken,
            other => return Err(CskvError::Format(format!("unknown quant axis {other}"))),
        };
        let spec = QuantSpec {
            bits: meta.bits,
            axis,
            group_size: meta.group_size,
        };
        spec.check()?;
        let [rows, cols] = codes.shape[..] else {
            return Err(CskvError::Format(format!("{name}.codes must be 2-D")));
        };
        let raw: Vec<u8> = codes.values.iter().map(|v| *v as u8).collect();
        let scales: Vec<f16> = get("scales")?
            .values
            .iter()
            .map(|v| f16::from_f64(*v))
            .collect();
        let zeros: Vec<f16> = get("zeros")?
            .values
            .iter()
            .map(|v| f16::from_f64(*v))
            .collect();
        let groups = spec.n_groups(rows, cols);
        if scales.len() != groups || zeros.len() != groups {
            return Err(CskvError::Format(format!(
                "{name}: expected {groups} groups, found {} scales / {} zeros",
                scales.len(),
                zeros.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            spec,
            codes: pack_codes(&raw),
            scales,
            zeros,
        })
    }
}

pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|p| (p[0] & 0x0f) | (p.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_codes(packed: &[u8], n: usize) -> Vec<u8> {
    packed
        .iter()
        .flat_map(|b| [b & 0x0f, b >> 4])
        .take(n)
        .collect()
}

/// Largest fp16 value `<= x`.
fn f16_floor(x: f64) -> f16 {
    let h = f16::from_f64(x);
    if h.is_infinite() {
        return if x > 0.0 { f16::MAX } else { f16::MIN };
    }
    if h.to_f64() <= x {
        return h;
    }
    let bits = h.to_bits();
    let down = if bits == 0 {
        0x8001
    } else if bits & 0x8000 == 0 {
        bits - 1
    } else {
        bits + 1
    };
    f16::from_bits(down)
}

/// Smallest fp16 value `>= x` (x non-negative here).
fn f16_ceil(x: f64) -> f16 {
    let h = f16::from_f64(x);
    if h.is_infinite() {
        return f16::MAX;
    }
    if h.to_f64() >= x {
        return h;
    }
    let bits = h.to_bits();
    let up = if bits & 0x8000 == 0 {
        bits + 1
    } else if bits == 0x8000 {
        0x0001
    } else {
        bits - 1
    };
    f16::from_bits(up)
}

pub fn quantize(m: &Matrix, spec: &QuantSpec) -> QuantizedTensor {
    let (rows, cols) = m.shape();
    let groups = spec.n_groups(rows, cols);
    let mut mins = vec![f64::INFINITY; groups];
    let mut maxs = vec![f64::NEG_INFINITY; groups];
    for r in 0..rows {
        for (c, v) in m.row(r).iter().enumerate() {
            let g = spec.group_of(cols, r, c);
            mins[g] = mins[g].min(*v);
            maxs[g] = maxs[g].max(*v);
        }
    }
    let mut scales = Vec::with_capacity(groups);
    let mut zeros = Vec::with_capacity(groups);
    for (lo, hi) in mins.iter().zip(&maxs) {
        let zero = f16_floor(*lo);
        let scale = if hi > lo {
            f16_ceil((hi - zero.to_f64()) / LEVELS)
        } else {
            f16::ONE
        };
        scales.push(scale);
        zeros.push(zero);
    }
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, v) in m.row(r).iter().enumerate() {
            let g = spec.group_of(cols, r, c);
            let q = ((v - zeros[g].to_f64()) / scales[g].to_f64()).round();
            codes.push(q.clamp(0.0, LEVELS) as u8);
        }
    }
    QuantizedTensor {
        rows,
        cols,
        spec: *spec,
        codes: pack_codes(&codes),
        scales,
        zeros,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |r, c| {
        let g = q.spec.group_of(q.cols, r, c);
        f64::from(q.code(r, c)) * q.scale(g) + q.zero(g)
    })
}

/// Quantize-dequantize round trip.
pub fn fake_quant(m: &Matrix, spec: &QuantSpec) -> Matrix {
    dequantize(&quantize(m, spec))
}

/// Straight-through mask: true where the element lies inside its group's
/// representable range (the gradient passes), false where it was clipped.
pub fn ste_mask(m: &Matrix, q: &QuantizedTensor) -> Vec<bool> {
    let mut mask = Vec::with_capacity(m.rows() * m.cols());
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            let g = q.spec.group_of(q.cols, r, c);
            let lo = q.zero(g);
            let hi = lo + LEVELS * q.scale(g);
            mask.push(*v >= lo && *v <= hi);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_group_round_trips() {
        let m = Matrix::from_fn(40, 3, |_, _| 0.75);
        for spec in [QuantSpec::keys(), QuantSpec::values()] {
            let q = quantize(&m, &spec);
            assert!(unpack_codes(&q.codes, 120).iter().all(|c| *c == 0));
            assert_eq!(dequantize(&q), m);
        }
    }

    #[test]
    fn representable_grid_round_trips() {
        // one per-token group holding zero + k·scale for k = 0..15
        let m = Matrix::from_fn(1, 16, |_, c| -1.5 + 0.125 * c as f64);
        let q = quantize(&m, &QuantSpec::values());
        assert_eq!(q.zero(0), -1.5);
        assert_eq!(q.scale(0), 0.125);
        assert_eq!(dequantize(&q), m);
        assert_eq!(unpack_codes(&q.codes, 16), (0..16).collect::<Vec<u8>>());
    }

    #[test]
    fn random_groups_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::random_normal(70, 45, 2.0, &mut rng);
        for spec in [
            QuantSpec::keys(),
            QuantSpec::values(),
            QuantSpec::new(QuantAxis::PerToken, 7).unwrap(),
        ] {
            let q = quantize(&m, &spec);
            let d = dequantize(&q);
            for r in 0..70 {
                for c in 0..45 {
                    let g = spec.group_of(45, r, c);
                    assert!((d.get(r, c) - m.get(r, c)).abs() <= q.scale(g) / 2.0 + 1e-6);
                }
            }
            assert!(ste_mask(&m, &q).iter().all(|b| *b));
        }
    }

    #[test]
    fn fake_quant_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Matrix::random_normal(33, 10, 1.0, &mut rng);
        for spec in [QuantSpec::keys(), QuantSpec::values()] {
            let once = fake_quant(&m, &spec);
            assert_eq!(fake_quant(&once, &spec), once);
            assert_eq!(once, dequantize(&quantize(&m, &spec)));
        }
        let c = Matrix::from_fn(5, 5, |_, _| -2.0);
        assert_eq!(fake_quant(&c, &QuantSpec::keys()), c);
    }

    #[test]
    fn outlier_only_moves_its_own_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Matrix::random_normal(64, 64, 1.0, &mut rng);
        let mut spiked = base.clone();
        spiked.set(40, 9, 50.0);
        for spec in [QuantSpec::keys(), QuantSpec::values()] {
            let a = quantize(&base, &spec);
            let b = quantize(&spiked, &spec);
            let hit = spec.group_of(64, 40, 9);
            let changed: Vec<usize> = (0..a.scales.len())
                .filter(|g| a.scales[*g] != b.scales[*g])
                .collect();
            assert_eq!(changed, vec![hit]);
            let members = spec.group_members(64, 64, hit);
            match spec.axis {
                // down the token axis, one channel
                QuantAxis::PerChannel => {
                    assert!(members.iter().all(|(_, c)| *c == 9));
                    assert_eq!(members.first(), Some(&(32, 9)));
                }
                // along the channel axis, one token
                QuantAxis::PerToken => {
                    assert!(members.iter().all(|(r, _)| *r == 40));
                    assert_eq!(members.first(), Some(&(40, 0)));
                }
            }
        }
    }

    #[test]
    fn packing_all_codes() {
        let codes: Vec<u8> = (0..16)
            .flat_map(|a| (0..16).map(move |b| [a, b]))
            .flatten()
            .collect();
        assert_eq!(unpack_codes(&pack_codes(&codes), codes.len()), codes);
        let odd = [3u8, 15, 9];
        assert_eq!(pack_codes(&odd), vec![0xf3, 0x09]);
        assert_eq!(unpack_codes(&pack_codes(&odd), 3), odd);
    }

    #[test]
    fn container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Matrix::random_normal(37, 5, 1.0, &mut rng);
        let q = quantize(&m, &QuantSpec::keys());
        let t = q.to_tensors("layers.0.k_latent");
        let bytes = crate::tensorio::encode_container(&t).unwrap();
        let back = crate::tensorio::decode_container(&bytes).unwrap();
        assert_eq!(
            QuantizedTensor::from_tensors("layers.0.k_latent", &back).unwrap(),
            q
        );
        assert_eq!(q.nbytes(), 93 + 4 * q.scales.len());
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(QuantSpec::new(QuantAxis::PerToken, 0).is_err());
        let spec = QuantSpec {
            bits: 8,
            ..QuantSpec::keys()
        };
        assert!(spec.check().is_err());
    }

    #[test]
    fn directed_fp16_rounding() {
        for x in [0.1, -0.1, 1e-3, -3.7, 0.0, 123.456] {
            assert!(f16_floor(x).to_f64() <= x);
            assert!(f16_ceil(x.abs()).to_f64() >= x.abs());
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(codes in prop::collection::vec(0u8..16, 0..200)) {
            prop_assert_eq!(unpack_codes(&pack_codes(&codes), codes.len()), codes);
        }
    }
}
