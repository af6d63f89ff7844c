use crate::error::{CskvError, Result};
use crate::numerics::{dot, Matrix};

pub const RMS_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x²) + ε) · scale`
pub fn rmsnorm(x: &[f64], scale: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), scale.len(), "rmsnorm: length mismatch");
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// In-place max-subtracted softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

/// Rotary position embedding in the "rotate half" layout: within each head,
/// element `i` pairs with element `i + d_head/2`, rotated by
/// `position · theta^(-2i/d_head)`.
#[derive(Debug, Clone, Copy)]
pub struct Rope {
    pub n_heads: usize,
    pub d_head: usize,
    pub theta: f64,
}

impl Rope {
    pub fn new(n_heads: usize, d_head: usize, theta: f64) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(CskvError::Config(format!(
                "rotary embeddings need an even head dim, got {d_head}"
            )));
        }
        Ok(Self {
            n_heads,
            d_head,
            theta,
        })
    }

    pub fn rotate(&self, row: &[f64], position: usize) -> Vec<f64> {
        let mut out = row.to_vec();
        self.rotate_in_place(&mut out, position);
        out
    }

    pub fn rotate_in_place(&self, row: &mut [f64], position: usize) {
        assert_eq!(row.len(), self.n_heads * self.d_head, "rope: row width");
        if position == 0 {
            return;
        }
        let half = self.d_head / 2;
        let p = position as f64;
        for i in 0..half {
            let freq = self.theta.powf(-2.0 * i as f64 / self.d_head as f64);
            let (sin, cos) = (p * freq).sin_cos();
            for h in 0..self.n_heads {
                let base = h * self.d_head;
                let (a, b) = (row[base + i], row[base + i + half]);
                row[base + i] = a * cos - b * sin;
                row[base + i + half] = a * sin + b * cos;
            }
        }
    }
}

/// `rope_rotate` for a row covering all heads.
pub fn rope_rotate(row: &[f64], position: usize, n_heads: usize, theta: f64) -> Result<Vec<f64>> {
    if n_heads == 0 || row.len() % n_heads != 0 {
        return Err(CskvError::Config(format!(
            "row of width {} does not split into {n_heads} heads",
            row.len()
        )));
    }
    let rope = Rope::new(n_heads, row.len() / n_heads, theta)?;
    Ok(rope.rotate(row, position))
}

/// Multi-head attention of one query against rotated keys.
///
/// Returns the concatenated head outputs and, per head, the softmax weights
/// over the key rows.
pub fn attention_with_probs(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    n_heads: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    attention_prefix(q, keys, values, keys.rows(), n_heads)
}

/// Attention restricted to the first `n` key/value rows.
pub fn attention_prefix(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    n: usize,
    n_heads: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if n == 0 {
        return Err(CskvError::Input("attention over an empty cache".into()));
    }
    if keys.rows() < n || values.rows() < n || keys.cols() != q.len() || values.cols() != q.len() {
        return Err(CskvError::shape(
            "attention_forward",
            format!(
                "q {} keys {:?} values {:?}",
                q.len(),
                keys.shape(),
                values.shape()
            ),
        ));
    }
    let d_head = q.len() / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let span = h * d_head..(h + 1) * d_head;
        let qh = &q[span.clone()];
        let mut scores: Vec<f64> = (0..n)
            .map(|j| dot(qh, &keys.row(j)[span.clone()]) * scale)
            .collect();
        softmax_in_place(&mut scores);
        let oh = &mut out[span.clone()];
        for (j, p) in scores.iter().enumerate() {
            for (o, v) in oh.iter_mut().zip(&values.row(j)[span.clone()]) {
                *o += p * v;
            }
        }
        probs.push(scores);
    }
    Ok((out, probs))
}

pub fn attention_forward(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    n_heads: usize,
) -> Result<Vec<f64>> {
    attention_with_probs(q, keys, values, n_heads).map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmsnorm_examples() {
        let ones = vec![1.0; 8];
        for v in rmsnorm(&ones, &ones) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert!(rmsnorm(&[0.0; 4], &[1.0; 4]).iter().all(|v| *v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random_normal(1, 64, 3.0, &mut rng);
        let y = rmsnorm(x.as_slice(), &[1.0; 64]);
        let ms = y.iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rope_identity_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row = Matrix::random_normal(1, 16, 1.0, &mut rng).into_vec();
        assert_eq!(rope_rotate(&row, 0, 2, 10_000.0).unwrap(), row);
        let rot = rope_rotate(&row, 17, 2, 10_000.0).unwrap();
        for h in 0..2 {
            for i in 0..4 {
                let (a, b) = (row[h * 8 + i], row[h * 8 + i + 4]);
                let (c, d) = (rot[h * 8 + i], rot[h * 8 + i + 4]);
                assert!(((a * a + b * b).sqrt() - (c * c + d * d).sqrt()).abs() < 1e-9);
            }
        }
        assert!(rope_rotate(&[0.0; 6], 1, 2, 10_000.0).is_err());
    }

    #[test]
    fn rope_relative_position_against_trig_oracle() {
        // ⟨rot(q,p), rot(k,s)⟩ = Σ_i (q_a k_a + q_b k_b) cos((p−s)ω_i) + (q_a k_b − q_b k_a) sin((p−s)ω_i)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 8;
        let theta = 10_000.0;
        let q = Matrix::random_normal(1, d, 1.0, &mut rng).into_vec();
        let k = Matrix::random_normal(1, d, 1.0, &mut rng).into_vec();
        for (p, s) in [(3usize, 3usize), (9, 2), (40, 11)] {
            let got = dot(
                &rope_rotate(&q, p, 1, theta).unwrap(),
                &rope_rotate(&k, s, 1, theta).unwrap(),
            );
            let mut want = 0.0;
            for i in 0..d / 2 {
                let w = theta.powf(-2.0 * i as f64 / d as f64);
                let ang = (p as f64 - s as f64) * w;
                let (qa, qb, ka, kb) = (q[i], q[i + d / 2], k[i], k[i + d / 2]);
                want += (qa * ka + qb * kb) * ang.cos() + (qa * kb - qb * ka) * ang.sin();
            }
            assert!((got - want).abs() < 1e-9, "p={p} s={s}: {got} vs {want}");
        }
        let same = dot(
            &rope_rotate(&q, 7, 1, theta).unwrap(),
            &rope_rotate(&k, 7, 1, theta).unwrap(),
        );
        assert!((same - dot(&q, &k)).abs() < 1e-9);
    }

    fn naive_attention(q: &[f64], k: &Matrix, v: &Matrix, heads: usize) -> Vec<f64> {
        let dh = q.len() / heads;
        let mut out = vec![0.0; q.len()];
        for h in 0..heads {
            let mut w = Vec::new();
            for j in 0..k.rows() {
                let mut s = 0.0;
                for i in 0..dh {
                    s += q[h * dh + i] * k.get(j, h * dh + i);
                }
                w.push((s / (dh as f64).sqrt()).exp());
            }
            let z: f64 = w.iter().sum();
            for i in 0..dh {
                out[h * dh + i] = (0..k.rows()).map(|j| w[j] / z * v.get(j, h * dh + i)).sum();
            }
        }
        out
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Matrix::random_normal(1, 8, 1.0, &mut rng).into_vec();
        let k1 = Matrix::random_normal(1, 8, 1.0, &mut rng);
        let v1 = Matrix::random_normal(1, 8, 1.0, &mut rng);
        assert_eq!(attention_forward(&q, &k1, &v1, 2).unwrap(), v1.row(0));

        let krep = Matrix::from_fn(5, 8, |_, c| k1.get(0, c));
        let v = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let out = attention_forward(&q, &krep, &v, 2).unwrap();
        for c in 0..8 {
            let mean = v.column(c).iter().sum::<f64>() / 5.0;
            assert!((out[c] - mean).abs() < 1e-12);
        }

        let k = Matrix::random_normal(8, 8, 1.0, &mut rng);
        let v = Matrix::random_normal(8, 8, 1.0, &mut rng);
        let (out, probs) = attention_with_probs(&q, &k, &v, 2).unwrap();
        let want = naive_attention(&q, &k, &v, 2);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        for p in probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(attention_forward(&q, &Matrix::zeros(0, 8), &Matrix::zeros(0, 8), 2).is_err());
    }
}
