// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` linear algebra: matrices, SVD, and seeded orthonormal bases.

mod matrix;
mod svd;

pub use matrix::{axpy, dot, max_abs_diff, norm, Matrix};
pub use svd::{svd, SvdResult};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SpectroError};

/// `d x n` matrix with orthonormal columns drawn from a seeded Gaussian
/// fill followed by modified Gram-Schmidt (two passes).
///
/// Columns are generated one at a time from a single ChaCha8 stream, so
/// `random_orthonormal(d, n, s)` is exactly the first `n` columns of
/// `random_orthonormal(d, d, s)`.
pub fn random_orthonormal(d: usize, n: usize, seed: u64) -> Result<Matrix> {
    if n == 0 || n > d {
        return Err(SpectroError::InvalidArgument(format!("random_orthonormal needs 1 <= n <= d, got d={d}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut col: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let raw = norm(&col);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(b, &col);
                axpy(-p, b, &mut col);
            }
        }
        let nn = norm(&col);
        // a draw almost inside the current span; resample
        if nn <= raw * 1e-6 {
            continue;
        }
        col.iter_mut().for_each(|x| *x /= nn);
        basis.push(col);
    }
    Matrix::from_columns(&basis)
}
