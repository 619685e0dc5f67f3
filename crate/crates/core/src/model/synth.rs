// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerWeights, ModelBundle, ModelConfig, TokenSequence};
use crate::error::Result;
use crate::linalg::{self, Matrix};

fn gaussian_f32(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    // values rounded through f32 so an LSPC round trip is lossless
    let m = Matrix::random_gaussian_with(rows, cols, scale, rng);
    Matrix::from_raw(rows, cols, m.into_data().into_iter().map(|v| f64::from(v as f32)).collect())
}

/// Deterministic Gaussian-initialized decoder: every matrix is drawn with
/// standard deviation `1/sqrt(fan_in)` (embeddings with unit deviation),
/// all from one ChaCha8 stream seeded with `seed`.
pub fn synth_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
    let inv = |n: usize| 1.0 / (n as f64).sqrt();

    let embed = gaussian_f32(v, d, 1.0, &mut rng);
    let unembed = gaussian_f32(v, d, inv(d), &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: gaussian_f32(d, config.q_width(), inv(d), &mut rng),
            wk: gaussian_f32(d, config.kv_width(), inv(d), &mut rng),
            wv: gaussian_f32(d, config.kv_width(), inv(d), &mut rng),
            wo: gaussian_f32(config.q_width(), d, inv(config.q_width()), &mut rng),
            w1: gaussian_f32(d, m, inv(d), &mut rng),
            w2: gaussian_f32(m, d, inv(m), &mut rng),
            w3: gaussian_f32(d, m, inv(d), &mut rng),
        })
        .collect();
    ModelBundle::from_absorbed(config.clone(), embed, unembed, layers)
}

/// A two-layer model with a hand-wired circuit that communicates through
/// the dark subspace of its unembedding matrix.
///
/// * Every cue token embedding carries a constant "gate" direction; every
///   token carries a light code for its class (`token % classes`).
/// * The writer MLP (layer 0) maps the class code onto a dark direction.
/// * The reader MLP (layer 1) reads that dark direction and writes the
///   light unembedding direction of the class's answer token.
///
/// On [`PlantedDarkWriter::prompts`], where every even position is
/// followed by its answer token, the model is confident only while the
/// writer's dark output survives.
#[derive(Debug, Clone)]
pub struct PlantedDarkWriter {
    pub bundle: ModelBundle,
    pub n_bands: usize,
    pub writer_layer: usize,
    pub reader_layer: usize,
    pub bos: usize,
    classes: usize,
}

impl PlantedDarkWriter {
    pub const D_MODEL: usize = 32;
    pub const N_BANDS: usize = 4;
    pub const VOCAB: usize = 64;
    const CLASSES: usize = 8;

    pub fn build(seed: u64) -> Result<Self> {
        let d = Self::D_MODEL;
        let classes = Self::CLASSES;
        let vocab = Self::VOCAB;
        let band = d / Self::N_BANDS;
        let dark_start = d - band;

        let config = ModelConfig {
            n_layers: 2,
            d_model: d,
            d_mlp: classes,
            n_heads: 2,
            n_kv_heads: 2,
            d_head: d / 2,
            vocab_size: vocab,
            rope_base: 10_000.0,
            rmsnorm_eps: 1e-5,
            max_seq_len: 128,
        };

        let q = linalg::random_orthonormal(d, d, seed)?;
        let dir = |i: usize| q.column(i);
        let gate = dir(0);
        let code = |c: usize| dir(1 + c);
        let dark = |c: usize| dir(dark_start + c);

        // W_u = U diag(sigma) Q^T with a clear gap before the dark band
        let left = linalg::random_orthonormal(vocab, d, seed.wrapping_add(1))?;
        let sigma: Vec<f64> = (0..d)
            .map(|i| if i < dark_start { 3.0 - 0.05 * i as f64 } else { 0.05 - 0.002 * (i - dark_start) as f64 })
            .collect();
        let unembed = left.scale_columns(&sigma)?.matmul(&q.transpose())?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let embed = Matrix::from_rows(
            &(0..vocab)
                .map(|t| {
                    // only cue tokens carry the gate, so answers and BoS leave both MLPs silent
                    let g = if t >= 2 * classes && t != vocab - 1 { 3.0 } else { 0.0 };
                    let mut e: Vec<f64> = gate.iter().map(|x| g * x).collect();
                    linalg::axpy(1.0, &code(t % classes), &mut e);
                    for j in 1 + classes..dark_start {
                        let w: f64 = rng.random_range(-0.3..0.3);
                        linalg::axpy(w, &dir(j), &mut e);
                    }
                    e
                })
                .collect::<Vec<_>>(),
        )?;

        let gate_cols = Matrix::from_columns(&vec![gate.clone(); classes])?;
        let answer_dirs: Vec<Vec<f64>> = (0..classes)
            .map(|c| {
                // light part of the answer token's unembedding row, unit length
                let row = unembed.row(Self::answer_token(c)).to_vec();
                let mut light = vec![0.0; d];
                for i in 0..dark_start {
                    let qi = dir(i);
                    linalg::axpy(linalg::dot(&qi, &row), &qi, &mut light);
                }
                let n = linalg::norm(&light);
                light.iter().map(|x| x / n).collect()
            })
            .collect();

        let writer = LayerWeights {
            wq: Matrix::random_gaussian(d, d, 0.2, seed.wrapping_add(3)),
            wk: Matrix::random_gaussian(d, d, 0.2, seed.wrapping_add(4)),
            wv: Matrix::random_gaussian(d, d, 0.2, seed.wrapping_add(5)),
            wo: Matrix::zeros(d, d),
            w1: gate_cols.clone(),
            w2: Matrix::from_rows(&(0..classes).map(dark).collect::<Vec<_>>())?,
            w3: Matrix::from_columns(&(0..classes).map(code).collect::<Vec<_>>())?,
        };
        let reader = LayerWeights {
            wq: Matrix::random_gaussian(d, d, 0.2, seed.wrapping_add(6)),
            wk: Matrix::random_gaussian(d, d, 0.2, seed.wrapping_add(7)),
            wv: Matrix::random_gaussian(d, d, 0.2, seed.wrapping_add(8)),
            wo: Matrix::zeros(d, d),
            w1: gate_cols,
            w2: Matrix::from_rows(
                &answer_dirs.iter().map(|a| a.iter().map(|x| 4.0 * x).collect()).collect::<Vec<_>>(),
            )?,
            w3: Matrix::from_columns(&(0..classes).map(dark).collect::<Vec<_>>())?,
        };

        Ok(Self {
            bundle: ModelBundle::from_absorbed(config, embed, unembed, vec![writer, reader])?,
            n_bands: Self::N_BANDS,
            writer_layer: 0,
            reader_layer: 1,
            bos: vocab - 1,
            classes,
        })
    }

    /// Answer token of class `c`.
    pub fn answer_token(c: usize) -> usize {
        Self::CLASSES + c
    }

    pub fn answer_for(&self, token: usize) -> usize {
        Self::answer_token(token % self.classes)
    }

    /// `n` prompts of `pairs` (cue, answer) pairs after BoS; cues are
    /// drawn from the non-answer, non-BoS tokens.
    pub fn prompts(&self, n: usize, pairs: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = 2 * self.classes;
        (0..n)
            .map(|_| {
                let mut ids = Vec::with_capacity(2 * pairs);
                for _ in 0..pairs {
                    let cue = rng.random_range(lo..self.bos);
                    ids.push(cue);
                    ids.push(self.answer_for(cue));
                }
                TokenSequence::with_bos(self.bos, ids)
            })
            .collect()
    }
}
