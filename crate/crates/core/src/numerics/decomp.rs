use crate::error::{CskvError, Result};

use super::matrix::{dot, Matrix};

/// Sweep cap for the one-sided Jacobi iteration.
pub const SVD_MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `M = U · diag(S) · Vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// Rank-`r` truncation `U_r · diag(S_r) · Vt_r`.
    pub fn truncated(&self, rank: usize) -> Matrix {
        let r = rank.min(self.s.len());
        let ur = self.u.slice_cols(0, r).scale_cols(&self.s[..r]);
        matmul(&ur, &self.vt.slice_rows(0, r)).expect("consistent svd shapes")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.s.len())
    }

    /// `√(Σ_{i>r} S_i²)`: the Frobenius error of the best rank-`r` approximation.
    pub fn tail_norm(&self, rank: usize) -> f64 {
        self.s.iter().skip(rank).map(|s| s * s).sum::<f64>().sqrt()
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(CskvError::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, av) in arow.iter().enumerate().take(k) {
            if *av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(CskvError::shape(
            "matmul_tn",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let brow = b.row(r);
        for (i, av) in a.row(r).iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            for (o, bv) in out.row_mut(i).iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(CskvError::shape(
            "matmul_nt",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        dot(a.row(i), b.row(j))
    }))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations on the columns.
///
/// Wide inputs are handled through the transpose. Columns of `U` belonging to
/// zero singular values are completed to an orthonormal set.
pub fn thin_svd(m: &Matrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(CskvError::Input("thin_svd of an empty matrix".into()));
    }
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose())?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    jacobi_svd(m)
}

fn jacobi_svd(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    // column-major working copies
    let mut g: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON;
    // columns already at roundoff level relative to the whole matrix are left alone
    let energy: f64 = g.iter().map(|c| dot(c, c)).sum();
    let floor = energy * ((rows.max(n) as f64) * f64::EPSILON).powi(2);
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if gamma == 0.0
                    || alpha <= floor
                    || beta <= floor
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (gp, gq) = pair_mut(&mut g, p, q);
                rotate(gp, gq, c, s);
                let (vp, vq) = pair_mut(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CskvError::numeric(
            "thin_svd",
            format!("Jacobi iteration did not converge after {sweeps} sweeps"),
        ));
    }

    let mut order: Vec<(usize, f64)> = g
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dot(c, c).sqrt()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let smax = order.first().map_or(0.0, |o| o.1);
    let null_tol = smax * (rows.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vt = Matrix::zeros(n, n);
    let mut deficient = Vec::new();
    for (k, (idx, sigma)) in order.iter().enumerate() {
        if *sigma > null_tol && *sigma > 0.0 {
            u_cols.push(g[*idx].iter().map(|x| x / sigma).collect());
            s.push(*sigma);
        } else {
            u_cols.push(vec![0.0; rows]);
            s.push(0.0);
            deficient.push(k);
        }
        vt.row_mut(k).copy_from_slice(&v[*idx]);
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let u = Matrix::from_fn(rows, n, |r, c| u_cols[c][r]);
    Ok(SvdResult { u, s, vt })
}

fn pair_mut(cols: &mut [Vec<f64>], p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all others
/// (modified Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < dim, "cannot complete orthonormal basis");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let proj = dot(&e, col);
                    e.iter_mut().zip(col).for_each(|(x, c)| *x -= proj * c);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                cols[slot] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Householder QR, `m = Q · R`, with `Q` having orthonormal columns and the
/// diagonal of `R` made non-negative.
pub fn qr_factor(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(CskvError::shape(
            "qr_factor",
            format!("needs rows >= cols, got {rows}x{cols}"),
        ));
    }
    let mut r = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let mut x: Vec<f64> = (k..rows).map(|i| r.get(i, k)).collect();
        let norm = dot(&x, &x).sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        x[0] -= alpha;
        let vnorm = dot(&x, &x).sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        x.iter_mut().for_each(|v| *v /= vnorm);
        for j in k..cols {
            let proj: f64 = (k..rows).map(|i| x[i - k] * r.get(i, j)).sum();
            for i in k..rows {
                let val = r.get(i, j) - 2.0 * x[i - k] * proj;
                r.set(i, j, val);
            }
        }
        reflectors.push(x);
    }
    // Q = H_0 H_1 ... H_{cols-1} applied to the first `cols` columns of I.
    let mut q = Matrix::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..cols).rev() {
        let x = &reflectors[k];
        if x.is_empty() {
            continue;
        }
        for j in 0..cols {
            let proj: f64 = (k..rows).map(|i| x[i - k] * q.get(i, j)).sum();
            for i in k..rows {
                let val = q.get(i, j) - 2.0 * x[i - k] * proj;
                q.set(i, j, val);
            }
        }
    }
    let mut r_sq = Matrix::from_fn(cols, cols, |i, j| if j >= i { r.get(i, j) } else { 0.0 });
    for i in 0..cols {
        if r_sq.get(i, i) < 0.0 {
            r_sq.row_mut(i).iter_mut().for_each(|v| *v = -*v);
            for row in 0..rows {
                let val = -q.get(row, i);
                q.set(row, i, val);
            }
        }
    }
    Ok((q, r_sq))
}

/// Minimum-norm least-squares solution of `a · X ≈ b` via the SVD
/// pseudo-inverse.
pub fn solve_least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(CskvError::shape(
            "solve_least_squares",
            format!("a is {:?}, b is {:?}", a.shape(), b.shape()),
        ));
    }
    let svd = thin_svd(a)?;
    let smax = svd.s.first().copied().unwrap_or(0.0);
    let cutoff = smax * (a.rows().max(a.cols()) as f64) * f64::EPSILON;
    // X = V · diag(1/s) · Uᵀ b
    let mut utb = matmul_tn(&svd.u, b)?;
    for (k, s) in svd.s.iter().enumerate() {
        let inv = if *s > cutoff { 1.0 / s } else { 0.0 };
        utb.row_mut(k).iter_mut().for_each(|v| *v *= inv);
    }
    matmul_tn(&svd.vt, &utb)
}
