// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SpectroError};

/// Dense row-major `f64` matrix.
///
/// Values are immutable once built: every transformation returns a new
/// matrix, so a `Matrix` can be shared across threads freely.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix").field("rows", &self.rows).field("cols", &self.cols).finish_non_exhaustive()
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(SpectroError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(SpectroError::NonFinite { what: format!("{rows}x{cols} matrix"), index });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix without the finiteness check. Used for activation
    /// buffers, which may legitimately diverge.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// Stacks equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SpectroError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Places `cols` as the columns of a new matrix.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(SpectroError::Shape("ragged columns".into()));
        }
        Ok(Self::from_fn(rows, columns.len(), |i, j| columns[j][i]))
    }

    /// Matrix of independent standard normal draws, multiplied by `scale`.
    /// Entries are generated row by row from a ChaCha8 stream seeded with `seed`.
    pub fn random_gaussian(rows: usize, cols: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_gaussian_with(rows, cols, scale, &mut rng)
    }

    pub fn random_gaussian_with(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self::from_raw(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Contiguous column slice `[range.start, range.end)`.
    pub fn columns(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.cols, "column range out of bounds");
        let width = range.len();
        Self::from_fn(self.rows, width, |i, j| self.get(i, range.start + j))
    }

    /// Gathers the listed columns in order.
    pub fn select_columns(&self, indices: &[usize]) -> Self {
        Self::from_fn(self.rows, indices.len(), |i, j| self.get(i, indices[j]))
    }

    /// Contiguous row slice.
    pub fn row_block(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.rows, "row range out of bounds");
        Self::from_raw(range.len(), self.cols, self.data[range.start * self.cols..range.end * self.cols].to_vec())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(SpectroError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_raw(self.rows, other.cols, out))
    }

    /// Row vector times matrix: `x · self`.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(SpectroError::Shape(format!(
                "row vector of length {} against {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
        Ok(out)
    }

    /// Matrix times column vector: `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(SpectroError::Shape(format!(
                "column vector of length {} against {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(SpectroError::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Self::from_raw(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    /// Multiplies row `i` by `scales[i]`.
    pub fn scale_rows(&self, scales: &[f64]) -> Result<Self> {
        if scales.len() != self.rows {
            return Err(SpectroError::Shape(format!("{} row scales for {} rows", scales.len(), self.rows)));
        }
        Ok(Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * scales[i]))
    }

    /// Multiplies column `j` by `scales[j]`.
    pub fn scale_columns(&self, scales: &[f64]) -> Result<Self> {
        if scales.len() != self.cols {
            return Err(SpectroError::Shape(format!("{} column scales for {} columns", scales.len(), self.cols)));
        }
        Ok(Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * scales[j]))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Largest absolute entrywise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// FNV-1a over the IEEE bit patterns; identical matrices give identical sums.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mix = |hash: &mut u64, bytes: &[u8]| {
            for &b in bytes {
                *hash ^= u64::from(b);
                *hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        mix(&mut hash, &(self.rows as u64).to_le_bytes());
        mix(&mut hash, &(self.cols as u64).to_le_bytes());
        for v in &self.data {
            mix(&mut hash, &v.to_bits().to_le_bytes());
        }
        hash
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Largest absolute entrywise difference between two vectors.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0, f64::NAN, 0.0, 0.0]),
            Err(SpectroError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(Matrix::new(2, 3, vec![0.0; 5]), Err(SpectroError::Shape(_))));
    }

    #[test]
    fn vecmat_and_matvec_agree_with_matmul() {
        let a = Matrix::random_gaussian(3, 5, 1.0, 4);
        let x = vec![1.0, -2.0, 0.5];
        let row = Matrix::new(1, 3, x.clone()).unwrap();
        let via_matmul = row.matmul(&a).unwrap();
        assert!(max_abs_diff(&a.vecmat(&x).unwrap(), via_matmul.data()) < 1e-14);

        let y = vec![0.3, 0.1, -1.0, 2.0, 0.0];
        let col = Matrix::new(5, 1, y.clone()).unwrap();
        let via_matmul = a.matmul(&col).unwrap();
        assert!(max_abs_diff(&a.matvec(&y).unwrap(), via_matmul.data()) < 1e-14);
    }

    #[test]
    fn checksum_detects_single_bit_changes() {
        let a = Matrix::random_gaussian(4, 4, 1.0, 0);
        let mut data = a.data().to_vec();
        data[5] = f64::from_bits(data[5].to_bits() ^ 1);
        let b = Matrix::new(4, 4, data).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }
}
