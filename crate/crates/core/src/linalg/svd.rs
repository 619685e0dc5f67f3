// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thin singular value decomposition by one-sided (Hestenes) Jacobi.
//!
//! Tall inputs (`m > n`) are first reduced with a Householder QR so the
//! Jacobi sweeps run on the `n x n` triangular factor. Wide inputs are
//! handled through the transpose.
//!
//! One-sided Jacobi leaves the working columns orthogonal *relative to
//! their own norms*, so the left singular vectors stay orthonormal even
//! for tiny singular values. Exactly-zero columns are completed with
//! Gram-Schmidt against the standard basis.

use super::matrix::{axpy, dot, norm, Matrix};
use crate::error::{Result, SpectroError};

const MAX_SWEEPS: usize = 80;

/// `A = U diag(sigma) V^T` with `r = min(m, n)` columns in `U` and `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m x r`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// `n x r`, orthonormal columns. The largest-magnitude entry of each
    /// column is positive (first such entry on ties).
    pub v: Matrix,
}

impl SvdResult {
    /// `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let us = self.u.scale_columns(&self.sigma).expect("sigma matches U");
        us.matmul(&self.v.transpose()).expect("U and V agree on rank")
    }
}

/// Computes the thin SVD of `a`.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(SpectroError::InvalidArgument("svd of an empty matrix".into()));
    }
    if let Some(index) = a.data().iter().position(|v| !v.is_finite()) {
        return Err(SpectroError::NonFinite { what: format!("svd input ({m}x{n})"), index });
    }

    let (u_cols, sigma, v_cols) = if m >= n {
        tall_svd(a)?
    } else {
        let (u, s, v) = tall_svd(&a.transpose())?;
        (v, s, u)
    };

    let mut u_cols = u_cols;
    let mut v_cols = v_cols;
    fix_signs(&mut u_cols, &mut v_cols);

    Ok(SvdResult { u: Matrix::from_columns(&u_cols)?, sigma, v: Matrix::from_columns(&v_cols)? })
}

type Columns = Vec<Vec<f64>>;

/// SVD for `m >= n`, returning column lists sorted by descending sigma.
fn tall_svd(a: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (m, n) = a.shape();
    let cols: Columns = (0..n).map(|j| a.column(j)).collect();

    if m > n {
        let (q, r) = householder_qr(cols);
        let (ur, sigma, v) = jacobi(r, n)?;
        // U = Q * U_r
        let u = ur
            .iter()
            .map(|urc| {
                let mut out = vec![0.0; m];
                for (k, &c) in urc.iter().enumerate() {
                    axpy(c, &q[k], &mut out);
                }
                out
            })
            .collect();
        Ok((u, sigma, v))
    } else {
        jacobi(cols, m)
    }
}

/// Thin Householder QR of the column list (`m x n`, `m >= n`).
/// Returns `Q` as `n` columns of length `m`, and `R` as `n` columns of length `n`.
fn householder_qr(mut a: Columns) -> (Columns, Columns) {
    let n = a.len();
    let m = a[0].len();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);

    for k in 0..n {
        let x = &a[k][k..];
        let xnorm = norm(x);
        if xnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vnorm);
        for col in a.iter_mut().skip(k) {
            let seg = &mut col[k..];
            let p = 2.0 * dot(&v, seg);
            axpy(-p, &v, seg);
        }
        reflectors.push(Some(v));
    }

    let r: Columns = (0..n).map(|j| (0..n).map(|i| if i <= j { a[j][i] } else { 0.0 }).collect()).collect();

    // Q = H_0 H_1 ... H_{n-1} [I_n; 0]
    let mut q: Columns = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, refl) in reflectors.iter().enumerate().rev() {
        let Some(v) = refl else { continue };
        for col in q.iter_mut() {
            let seg = &mut col[k..];
            let p = 2.0 * dot(v, seg);
            axpy(-p, v, seg);
        }
    }
    (q, r)
}

/// One-sided Jacobi on `cols` (each of length `m`).
fn jacobi(mut g: Columns, m: usize) -> Result<(Columns, Vec<f64>, Columns)> {
    let n = g.len();
    let mut v: Columns = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m as f64).sqrt().max(1.0);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SpectroError::Convergence { algorithm: "one-sided Jacobi SVD", iterations: MAX_SWEEPS });
    }

    let norms: Vec<f64> = g.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal singular values keep their column order
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u: Columns = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        let candidate = if s > f64::MIN_POSITIVE * 1e6 {
            let mut c: Vec<f64> = g[j].iter().map(|x| x / s).collect();
            if s < sigma[0] * 1e-8 {
                reorthogonalize(&mut c, &u);
            }
            let cn = norm(&c);
            if cn > 0.5 {
                c.iter_mut().for_each(|x| *x /= cn);
                Some(c)
            } else {
                None
            }
        } else {
            None
        };
        let col = match candidate {
            Some(c) => c,
            None => complete_basis(&u, m),
        };
        u.push(col);
    }
    let v_sorted = order.iter().map(|&j| v[j].clone()).collect();
    Ok((u, sigma, v_sorted))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn reorthogonalize(c: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p = dot(b, c);
            axpy(-p, b, c);
        }
    }
}

/// A unit vector orthogonal to every column of `basis`.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        reorthogonalize(&mut e, basis);
        let en = norm(&e);
        if en > 0.7 {
            e.iter_mut().for_each(|x| *x /= en);
            return e;
        }
        if best.as_ref().is_none_or(|(bn, _)| en > *bn) {
            best = Some((en, e));
        }
    }
    let (en, mut e) = best.expect("m > basis.len()");
    e.iter_mut().for_each(|x| *x /= en);
    e
}

/// Makes the largest-magnitude entry of every V column positive.
fn fix_signs(u: &mut Columns, v: &mut Columns) {
    for (uc, vc) in u.iter_mut().zip(v.iter_mut()) {
        let mut best = 0;
        for (i, x) in vc.iter().enumerate() {
            if x.abs() > vc[best].abs() {
                best = i;
            }
        }
        if vc[best] < 0.0 {
            vc.iter_mut().for_each(|x| *x = -*x);
            uc.iter_mut().for_each(|x| *x = -*x);
        }
    }
}
