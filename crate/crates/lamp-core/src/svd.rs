//! One-sided Jacobi singular value decomposition and rank truncation.
//!
//! The tall orientation of the input is orthogonalized column by column with
//! plane rotations until every pair of columns is orthogonal to a relative
//! tolerance of 1e-12 (or 60 sweeps elapse). Column norms are then the
//! singular values. Results are sorted descending, ties keep the original
//! column order, and each left singular vector is sign-fixed so that its
//! largest-magnitude entry is non-negative.

use crate::error::{LampError, Result};
use crate::matrix::Matrix;

const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// `a = u · diag(s) · vᵀ` with `k = min(rows, cols)` retained columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
    /// Sweeps used before convergence.
    pub sweeps: usize,
}

/// Leading `r` singular triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    pub u: Matrix,
    pub q: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank_cap(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        reconstruct_factors(&self.u, &self.s, &self.v)
    }

    /// Keeps the leading `r` columns and values.
    pub fn truncate(&self, r: usize) -> Result<TruncatedSvd> {
        truncate(self, r)
    }
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> Matrix {
        reconstruct_factors(&self.u, &self.q, &self.v)
    }
}

fn reconstruct_factors(u: &Matrix, s: &[f64], v: &Matrix) -> Matrix {
    let mut us = u.clone();
    for r in 0..us.rows() {
        for (x, sv) in us.row_mut(r).iter_mut().zip(s) {
            *x *= sv;
        }
    }
    us.matmul_nt(v).expect("factor shapes are consistent")
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LampError::contract("svd of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(LampError::contract("svd input contains non-finite entries"));
    }
    if a.rows() >= a.cols() {
        let (u, s, v, sweeps) = jacobi_tall(a);
        Ok(finish(u, s, v, sweeps))
    } else {
        // aᵀ = u' s v'ᵀ  ⇒  a = v' s u'ᵀ
        let (ut, s, vt, sweeps) = jacobi_tall(&a.transpose());
        Ok(finish(vt, s, ut, sweeps))
    }
}

/// Runs one-sided Jacobi on an `m×n` matrix with `m ≥ n`. Returns the
/// column-orthonormal left factor (m×n), unsorted singular values and the
/// accumulated right rotations (n×n).
fn jacobi_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix, usize) {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut w: Vec<f64> = (0..n).flat_map(|j| a.col(j)).collect();
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    let scale = a.frobenius_norm();
    let negligible = scale * f64::EPSILON * m as f64;
    let negligible_sq = negligible * negligible;

    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut max_off: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let wp = &w[p * m..(p + 1) * m];
                    let wq = &w[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= negligible_sq || beta <= negligible_sq || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= OFF_DIAGONAL_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, m, p, q, c, s);
                rotate(&mut v, n, p, q, c, s);
            }
        }
        if max_off <= OFF_DIAGONAL_TOL {
            break;
        }
    }

    let mut sigma = Vec::with_capacity(n);
    let mut u = Matrix::zeros(m, n);
    let mut missing = Vec::new();
    for j in 0..n {
        let col = &w[j * m..(j + 1) * m];
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        sigma.push(norm);
        if norm <= negligible {
            missing.push(j);
        } else {
            for (i, x) in col.iter().enumerate() {
                u.set(i, j, x / norm);
            }
        }
    }
    complete_orthonormal(&mut u, &missing);
    let vmat = Matrix::from_fn(n, n, |i, j| v[j * n + i]);
    (u, sigma, vmat, sweeps)
}

fn rotate(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let cp = &mut head[p * len..(p + 1) * len];
    let cq = &mut tail[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed (zero) columns of `u` with unit vectors orthogonal to
/// every other column, drawn from the standard basis by Gram–Schmidt.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, n) = u.shape();
    let mut filled: Vec<bool> = (0..n).map(|j| !missing.contains(&j)).collect();
    let mut candidate = 0;
    for &j in missing {
        loop {
            assert!(candidate < m, "ran out of basis vectors while completing U");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for k in (0..n).filter(|&k| filled[k]) {
                    let dot: f64 = (0..m).map(|i| u.get(i, k) * e[i]).sum();
                    for (i, x) in e.iter_mut().enumerate() {
                        *x -= dot * u.get(i, k);
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                for (i, x) in e.iter().enumerate() {
                    u.set(i, j, x / norm);
                }
                filled[j] = true;
                break;
            }
        }
    }
}

fn finish(u: Matrix, s: Vec<f64>, v: Matrix, sweeps: usize) -> SvdResult {
    let k = s.len();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable: equal values keep their original column order.
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).expect("finite singular values"));

    let mut us = Matrix::zeros(u.rows(), k);
    let mut vs = Matrix::zeros(v.rows(), k);
    let mut ss = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let ucol = u.col(src);
        let mut pivot = 0;
        for (i, x) in ucol.iter().enumerate() {
            if x.abs() > ucol[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if ucol[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in ucol.iter().enumerate() {
            us.set(i, dst, sign * x);
        }
        for i in 0..v.rows() {
            vs.set(i, dst, sign * v.get(i, src));
        }
        ss.push(s[src]);
    }
    SvdResult {
        u: us,
        s: ss,
        v: vs,
        sweeps,
    }
}

/// Leading `r` singular triplets of `s`; `1 ≤ r ≤ min(l, d)`.
pub fn truncate(s: &SvdResult, r: usize) -> Result<TruncatedSvd> {
    let k = s.s.len();
    if r == 0 || r > k {
        return Err(LampError::contract(format!(
            "truncation rank r = {r} must lie in 1..={k}"
        )));
    }
    Ok(TruncatedSvd {
        u: s.u.leading_cols(r),
        q: s.s[..r].to_vec(),
        v: s.v.leading_cols(r),
    })
}

/// Number of singular values above `rel_tol · σ₁`.
pub fn numerical_rank(a: &Matrix, rel_tol: f64) -> Result<usize> {
    let s = svd(a)?.s;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * top).count())
}
