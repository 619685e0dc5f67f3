// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures and a brute-force decoder used as an oracle.
#![allow(dead_code)]

use spectro::linalg::Matrix;
use spectro::model::{synth_model, LayerWeights, ModelBundle, ModelConfig, TokenSequence};

/// Where the reference decoder offers a patch callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefSite {
    Mlp(usize),
    Residual(usize),
}

pub struct RefOutput {
    /// `[t][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// `[l][t]`, stream entering layer `l`; last entry is the final stream.
    pub residuals: Vec<Vec<Vec<f64>>>,
}

fn ref_rmsnorm(x: &[f64], eps: f64) -> Vec<f64> {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    x.iter().map(|v| if r == 0.0 { 0.0 } else { v / r }).collect()
}

fn row_times(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum()).collect()
}

fn rotate(v: &mut [f64], pos: usize, base: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        let ang = pos as f64 / base.powf((2 * i) as f64 / d as f64);
        let (c, s) = (ang.cos(), ang.sin());
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Whole-sequence decoder: every position's queries, keys, and values are
/// formed up front and attention is an explicit masked `n x n` matrix.
pub fn reference_forward(
    b: &ModelBundle,
    tokens: &[usize],
    patch: &dyn Fn(RefSite, usize, &mut Vec<f64>),
) -> RefOutput {
    let c = &b.config;
    let n = tokens.len();
    let dh = c.d_head;
    let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| b.embed.row(t).to_vec()).collect();
    let mut residuals = Vec::new();

    for (l, w) in b.layers.iter().enumerate() {
        residuals.push(h.clone());
        let x: Vec<Vec<f64>> = h.iter().map(|v| ref_rmsnorm(v, c.rmsnorm_eps)).collect();
        let q: Vec<Vec<f64>> = x.iter().map(|v| row_times(v, &w.wq)).collect();
        let k: Vec<Vec<f64>> = x.iter().map(|v| row_times(v, &w.wk)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|v| row_times(v, &w.wv)).collect();

        let mut concat = vec![vec![0.0; c.n_heads * dh]; n];
        for head in 0..c.n_heads {
            let kv = head * c.n_kv_heads / c.n_heads;
            let qh: Vec<Vec<f64>> = (0..n)
                .map(|t| {
                    let mut s = q[t][head * dh..(head + 1) * dh].to_vec();
                    rotate(&mut s, t, c.rope_base);
                    s
                })
                .collect();
            let kh: Vec<Vec<f64>> = (0..n)
                .map(|t| {
                    let mut s = k[t][kv * dh..(kv + 1) * dh].to_vec();
                    rotate(&mut s, t, c.rope_base);
                    s
                })
                .collect();
            for t in 0..n {
                let mut scores = vec![f64::NEG_INFINITY; n];
                for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                    *score = qh[t].iter().zip(&kh[s]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for s in 0..=t {
                    let p = e[s] / z;
                    for i in 0..dh {
                        concat[t][head * dh + i] += p * v[s][kv * dh + i];
                    }
                }
            }
        }
        for t in 0..n {
            let attn = row_times(&concat[t], &w.wo);
            for (a, b) in h[t].iter_mut().zip(&attn) {
                *a += b;
            }
            let x2 = ref_rmsnorm(&h[t], c.rmsnorm_eps);
            let g = row_times(&x2, &w.w1);
            let u = row_times(&x2, &w.w3);
            let hidden: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let mut m = row_times(&hidden, &w.w2);
            patch(RefSite::Mlp(l), t, &mut m);
            for (a, b) in h[t].iter_mut().zip(&m) {
                *a += b;
            }
            patch(RefSite::Residual(l), t, &mut h[t]);
        }
    }
    residuals.push(h.clone());
    let logits = h
        .iter()
        .map(|v| {
            let x = ref_rmsnorm(v, c.rmsnorm_eps);
            (0..c.vocab_size).map(|r| b.unembed.row(r).iter().zip(&x).map(|(a, b)| a * b).sum()).collect()
        })
        .collect();
    RefOutput { logits, residuals }
}

pub fn no_patch(_: RefSite, _: usize, _: &mut Vec<f64>) {}

pub fn tiny_bundle(seed: u64) -> ModelBundle {
    synth_model(&ModelConfig::tiny(2, 16, 2, 32), seed).unwrap()
}

pub fn max_logit_diff(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(t, row)| row.iter().enumerate().map(move |(j, v)| (a.get(t, j) - v).abs()))
        .fold(0.0, f64::max)
}

/// Prompts of `len` non-BoS tokens drawn deterministically from
/// `2..vocab`, all starting with BoS id 1.
pub fn prompts(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<TokenSequence> {
    (0..n as u64)
        .map(|i| {
            let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i * 0x2545_f491);
            TokenSequence::with_bos(
                1,
                (0..len).map(|_| {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    2 + (x % (vocab as u64 - 2)) as usize
                }),
            )
        })
        .collect()
}

/// A model whose unembedding is diagonal, so its right singular vectors
/// are exactly the coordinate axes and the last axis is the darkest.
///
/// The embedding and layer 0 never touch the last coordinate; layer 1
/// reads it with weights of `1e200`. Coordinate-aligned filters keep that
/// coordinate exactly zero, while a random rotation leaks into it and the
/// reader overflows.
pub fn overflow_bundle() -> ModelBundle {
    let d = 16;
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: d,
        d_mlp: 8,
        n_heads: 2,
        n_kv_heads: 2,
        d_head: 8,
        vocab_size: d,
        rope_base: 10_000.0,
        rmsnorm_eps: 1e-5,
        max_seq_len: 64,
    };
    let dark = d - 1;
    let unembed = Matrix::from_fn(d, d, |i, j| if i == j { 2.0 - 0.1 * i as f64 } else { 0.0 });
    let zero_dark =
        |m: Matrix, axis_is_col: bool| {
            let (r, c) = m.shape();
            Matrix::from_fn(r, c, |i, j| {
                if (axis_is_col && j == dark) || (!axis_is_col && i == dark) {
                    0.0
                } else {
                    m.get(i, j)
                }
            })
        };
    let embed = zero_dark(Matrix::random_gaussian(d, d, 1.0, 11), true);
    let layer = |seed: u64| LayerWeights {
        wq: Matrix::random_gaussian(d, d, 0.25, seed),
        wk: Matrix::random_gaussian(d, d, 0.25, seed + 1),
        wv: Matrix::random_gaussian(d, d, 0.25, seed + 2),
        wo: zero_dark(Matrix::random_gaussian(d, d, 0.25, seed + 3), true),
        w1: Matrix::random_gaussian(d, 8, 0.25, seed + 4),
        w2: zero_dark(Matrix::random_gaussian(8, d, 0.25, seed + 5), true),
        w3: Matrix::random_gaussian(d, 8, 0.25, seed + 6),
    };
    let mut reader = layer(30);
    reader.w1 = Matrix::from_fn(d, 8, |i, _| if i == dark { 1e200 } else { 0.0 });
    reader.w3 = reader.w1.clone();
    ModelBundle::from_absorbed(cfg, embed, unembed.clone(), vec![layer(20), reader]).unwrap()
}
