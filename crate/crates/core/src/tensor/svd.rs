//! Truncated SVD via one-sided Jacobi rotations.
//!
//! Rotations act on the columns of whichever orientation has fewer columns,
//! so the implicit Gram matrix is `min(n, m)` square.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Sweep cap before reporting non-convergence.
pub const MAX_SWEEPS: usize = 60;
/// Relative off-diagonal threshold below which a column pair counts as orthogonal.
pub const ROTATION_TOL: f64 = 1e-12;

/// `m ≈ u · diag(s) · vᵀ` restricted to the leading `q` triplets.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// `n×q`, orthonormal columns.
    pub u: Matrix<T>,
    /// Non-increasing, non-negative.
    pub s: Vec<T>,
    /// `m×q`, orthonormal columns.
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let us = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul_nt(&self.v)
            .expect("svd factors have conformable shapes")
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// Rank-`q` truncated SVD of `m`.
pub fn truncated_svd<T: Scalar>(m: &Matrix<T>, q: usize) -> Result<SvdResult<T>> {
    let (n, k) = m.shape();
    let full = n.min(k);
    if q == 0 || q > full {
        return Err(Error::arg(format!(
            "svd rank {q} outside 1..={full} for {n}x{k} matrix"
        )));
    }
    let transposed = n < k;
    let work = if transposed { m.transpose() } else { m.clone() };
    let (rows, cols) = work.shape();

    // Column-major working copies: `w[j]` is column j of the matrix being
    // orthogonalised, `v[j]` accumulates the right rotations.
    let mut w: Vec<Vec<T>> = (0..cols).map(|j| work.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    let tol = T::lit(ROTATION_TOL).max(T::epsilon() * T::lit(4.0));
    // Columns at rounding-noise level relative to the whole matrix are
    // treated as zero; rotating noise against noise never converges.
    let frob2: T = w.iter().map(|c| dot(c, c)).sum();
    let floor = frob2 * T::epsilon() * T::epsilon();
    let mut converged = cols < 2;
    let mut worst = T::zero();
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        worst = T::zero();
        let mut rotated = false;
        for p in 0..cols {
            for q2 in p + 1..cols {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q2], &w[q2]);
                let gamma = dot(&w[p], &w[q2]);
                if alpha <= floor || beta <= floor {
                    continue;
                }
                let rel = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                if !rel.is_finite() {
                    return Err(Error::Numeric("non-finite value during Jacobi sweep".into()));
                }
                worst = worst.max(rel);
                if rel <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q2, c, s);
                rotate(&mut v, p, q2, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps (residual {worst})"
        )));
    }

    let sigma: Vec<T> = w.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| sigma[b].partial_cmp(&sigma[a]).unwrap_or(std::cmp::Ordering::Equal));
    let order = &order[..q];

    let smax = sigma[order[0]];
    let negligible = smax * T::epsilon() * T::lit(rows.max(cols) as f64);
    let mut left: Vec<Vec<T>> = Vec::with_capacity(q);
    let mut right: Vec<Vec<T>> = Vec::with_capacity(q);
    let mut values = Vec::with_capacity(q);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sj = sigma[j];
        if sj > negligible && sj > T::zero() {
            left.push(w[j].iter().map(|x| *x / sj).collect());
        } else {
            left.push(vec![T::zero(); rows]);
            pending.push(slot);
        }
        right.push(v[j].clone());
        values.push(sj);
    }
    for slot in pending {
        left[slot] = orthonormal_complement(&left, slot, rows);
    }

    for (ucol, vcol) in left.iter_mut().zip(right.iter_mut()) {
        let pivot_tol = T::lit(1e-10);
        if let Some(first) = ucol.iter().copied().find(|x| x.abs() > pivot_tol) {
            if first < T::zero() {
                ucol.iter_mut().for_each(|x| *x = -*x);
                vcol.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    let u = Matrix::from_fn(rows, q, |i, j| left[j][i]);
    let vmat = Matrix::from_fn(cols, q, |i, j| right[j][i]);
    Ok(if transposed {
        // Xᵀ = U S Vᵀ  ⇒  X = V S Uᵀ; keep the sign rule on the new U.
        let mut res = SvdResult { u: vmat, s: values, v: u };
        fix_signs(&mut res);
        res
    } else {
        SvdResult { u, s: values, v: vmat }
    })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(q);
    let (a, b) = (&mut head[p], &mut tail[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn fix_signs<T: Scalar>(res: &mut SvdResult<T>) {
    let (n, q) = res.u.shape();
    let tol = T::lit(1e-10);
    for j in 0..q {
        let first = (0..n).map(|i| res.u.get(i, j)).find(|x| x.abs() > tol);
        if matches!(first, Some(x) if x < T::zero()) {
            for i in 0..n {
                res.u.set(i, j, -res.u.get(i, j));
            }
            for i in 0..res.v.rows() {
                res.v.set(i, j, -res.v.get(i, j));
            }
        }
    }
}

/// Unit vector orthogonal to every filled column of `basis` except `skip`.
fn orthonormal_complement<T: Scalar>(basis: &[Vec<T>], skip: usize, dim: usize) -> Vec<T> {
    let filled: Vec<&Vec<T>> = basis
        .iter()
        .enumerate()
        .filter(|(i, c)| *i != skip && c.iter().any(|x| *x != T::zero()))
        .map(|(_, c)| c)
        .collect();
    let mut best: Option<Vec<T>> = None;
    let mut best_norm = T::zero();
    for e in 0..dim {
        let mut cand = vec![T::zero(); dim];
        cand[e] = T::one();
        // Two passes of Gram–Schmidt for stability.
        for _ in 0..2 {
            for b in &filled {
                let proj = dot(&cand, b);
                for (c, bi) in cand.iter_mut().zip(b.iter()) {
                    *c -= proj * *bi;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = Some(cand);
        }
        if best_norm > T::lit(0.5) {
            break;
        }
    }
    let mut out = best.unwrap_or_else(|| vec![T::zero(); dim]);
    if best_norm > T::zero() {
        out.iter_mut().for_each(|x| *x /= best_norm);
    }
    out
}
