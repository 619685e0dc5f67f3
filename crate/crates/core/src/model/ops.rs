// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Result, SpectroError};
use crate::linalg::Matrix;

/// `x / sqrt(mean(x^2) + eps)`; the learned scale lives in downstream weights.
pub fn rmsnorm(x: &[f64], eps: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| v / denom).collect()
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `position * base^(-2i/d)`.
pub fn apply_rope(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(2) {
        return Err(SpectroError::InvalidArgument(format!(
            "rotary embedding needs an even head dimension, got {}",
            x.len()
        )));
    }
    let mut out = x.to_vec();
    rope_in_place(&mut out, position, base);
    Ok(out)
}

pub(crate) fn rope_in_place(x: &mut [f64], position: usize, base: f64) {
    if position == 0 {
        return;
    }
    let d = x.len() as f64;
    for (i, pair) in x.chunks_exact_mut(2).enumerate() {
        let theta = position as f64 * base.powf(-2.0 * i as f64 / d);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

fn swish(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// `(Swish_1(x W_1) ⊙ x W_3) W_2`.
pub fn swiglu(x: &[f64], w1: &Matrix, w2: &Matrix, w3: &Matrix) -> Result<Vec<f64>> {
    if w1.shape() != w3.shape() || w2.rows() != w1.cols() {
        return Err(SpectroError::Shape(format!(
            "SwiGLU weights {:?}, {:?}, {:?} are inconsistent",
            w1.shape(),
            w2.shape(),
            w3.shape()
        )));
    }
    let gate = w1.vecmat(x)?;
    let up = w3.vecmat(x)?;
    let hidden: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| swish(g) * u).collect();
    w2.vecmat(&hidden)
}

/// Softmax with max subtraction. Non-finite input propagates as NaN.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}
