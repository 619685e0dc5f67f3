// SPDX-License-Identifier: MIT OR Apache-2.0

//! A LLaMa-style decoder at desk scale.
//!
//! Weights follow the row-vector convention: an activation `x` is a row
//! and is multiplied on the right, `x W`. RMSNorm scale vectors are folded
//! into the matrices that consume the normalized vector at load time, so
//! the forward pass only ever normalizes.

mod checkpoint;
mod forward;
mod generate;
mod ops;
mod synth;
mod tokenizer;

pub use checkpoint::{
    load_checkpoint, read_container, save_container, tensor_names, Container, ContainerHeader, RawTensor, TensorEntry,
    UnabsorbedWeights, LSPC_MAGIC, LSPC_VERSION,
};
pub use forward::{forward, mean_nll, ForwardOutput, ForwardTrace, HookRecord, NllSummary, TraceSpec};
pub use generate::{generate, sample_next, Decoder, Generation, SamplingParams};
pub use ops::{apply_rope, log_softmax, rmsnorm, softmax, swiglu};
pub use synth::{synth_model, PlantedDarkWriter};
pub use tokenizer::ByteTokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectroError};
use crate::linalg::Matrix;

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_eps() -> f64 {
    1e-5
}

/// Dimensional hyper-parameters of a decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// A small multi-head config with `d_head = d_model / n_heads`.
    pub fn tiny(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            d_model,
            d_mlp: 2 * d_model,
            n_heads,
            n_kv_heads: n_heads,
            d_head: d_model / n_heads,
            vocab_size,
            rope_base: default_rope_base(),
            rmsnorm_eps: default_eps(),
            max_seq_len: 256,
        }
    }

    pub fn llama2_7b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            d_mlp: 11008,
            n_heads: 32,
            n_kv_heads: 32,
            d_head: 128,
            vocab_size: 32_000,
            rope_base: default_rope_base(),
            rmsnorm_eps: default_eps(),
            max_seq_len: 4096,
        }
    }

    pub fn llama2_13b() -> Self {
        Self { n_layers: 40, d_model: 5120, d_mlp: 13824, n_heads: 40, n_kv_heads: 40, ..Self::llama2_7b() }
    }

    /// Query heads served by each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SpectroError::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.d_mlp == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!("d_model {} != n_heads {} * d_head {}", self.d_model, self.n_heads, self.d_head));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!("n_heads {} not divisible by n_kv_heads {}", self.n_heads, self.n_kv_heads));
        }
        if !self.d_head.is_multiple_of(2) {
            return fail(format!("rotary embeddings need an even d_head, got {}", self.d_head));
        }
        if self.vocab_size < self.d_model {
            return fail(format!(
                "vocab_size {} < d_model {} leaves the unembedding rank-deficient",
                self.vocab_size, self.d_model
            ));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return fail("rope_base must be positive".into());
        }
        if !(self.rmsnorm_eps >= 0.0 && self.rmsnorm_eps.is_finite()) {
            return fail("rmsnorm_eps must be non-negative".into());
        }
        Ok(())
    }
}

/// Weights of one decoder layer (norm scales already absorbed).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `d x (n_heads * d_head)`
    pub wq: Matrix,
    /// `d x (n_kv_heads * d_head)`
    pub wk: Matrix,
    /// `d x (n_kv_heads * d_head)`
    pub wv: Matrix,
    /// `(n_heads * d_head) x d`
    pub wo: Matrix,
    /// `d x d_mlp`
    pub w1: Matrix,
    /// `d_mlp x d`
    pub w2: Matrix,
    /// `d x d_mlp`
    pub w3: Matrix,
}

/// Configuration plus weights, ready for inference.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    /// `|V| x d`
    pub embed: Matrix,
    /// `|V| x d`, final norm scale folded into its columns.
    pub unembed: Matrix,
    pub layers: Vec<LayerWeights>,
    absorption_done: bool,
}

impl ModelBundle {
    /// Assembles a bundle whose weights already include every norm scale.
    pub fn from_absorbed(
        config: ModelConfig,
        embed: Matrix,
        unembed: Matrix,
        layers: Vec<LayerWeights>,
    ) -> Result<Self> {
        config.validate()?;
        let bundle = Self { config, embed, unembed, layers, absorption_done: true };
        bundle.check_shapes()?;
        Ok(bundle)
    }

    pub fn absorption_done(&self) -> bool {
        self.absorption_done
    }

    /// Query projection of head `h` at layer `l`: a `d x d_head` block.
    pub fn wq_head(&self, l: usize, h: usize) -> Matrix {
        let dh = self.config.d_head;
        self.layers[l].wq.columns(h * dh..(h + 1) * dh)
    }

    /// Output projection of head `h` at layer `l`: a `d_head x d` block.
    pub fn wo_head(&self, l: usize, h: usize) -> Matrix {
        let dh = self.config.d_head;
        self.layers[l].wo.row_block(h * dh..(h + 1) * dh)
    }

    /// Expected tensor shapes, keyed by container name (norms excluded).
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let mut out = vec![("embed".to_owned(), vec![v, d]), ("unembed".to_owned(), vec![v, d])];
        for i in 0..config.n_layers {
            out.extend([
                (format!("layer.{i}.wq"), vec![d, config.q_width()]),
                (format!("layer.{i}.wk"), vec![d, config.kv_width()]),
                (format!("layer.{i}.wv"), vec![d, config.kv_width()]),
                (format!("layer.{i}.wo"), vec![config.q_width(), d]),
                (format!("layer.{i}.w1"), vec![d, m]),
                (format!("layer.{i}.w2"), vec![m, d]),
                (format!("layer.{i}.w3"), vec![d, m]),
            ]);
        }
        out
    }

    /// Looks a weight matrix up by its container name.
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        match name {
            "embed" => return Some(&self.embed),
            "unembed" => return Some(&self.unembed),
            _ => {}
        }
        let rest = name.strip_prefix("layer.")?;
        let (idx, field) = rest.split_once('.')?;
        let layer = self.layers.get(idx.parse::<usize>().ok()?)?;
        Some(match field {
            "wq" => &layer.wq,
            "wk" => &layer.wk,
            "wv" => &layer.wv,
            "wo" => &layer.wo,
            "w1" => &layer.w1,
            "w2" => &layer.w2,
            "w3" => &layer.w3,
            _ => return None,
        })
    }

    fn check_shapes(&self) -> Result<()> {
        if self.layers.len() != self.config.n_layers {
            return Err(SpectroError::Config(format!(
                "{} layers for n_layers = {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for (name, expected) in Self::expected_shapes(&self.config) {
            let m = self.tensor(&name).expect("known tensor names");
            let found = vec![m.rows(), m.cols()];
            if found != expected {
                return Err(SpectroError::TensorShape { name, found, expected });
            }
        }
        Ok(())
    }
}

/// Token ids fed to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// `ids[0]` is the beginning-of-sequence token.
    pub bos_prepended: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, bos_prepended: bool) -> Self {
        Self { ids, bos_prepended }
    }

    /// Prepends `bos` to `ids`.
    pub fn with_bos(bos: usize, ids: impl IntoIterator<Item = usize>) -> Self {
        let mut all = vec![bos];
        all.extend(ids);
        Self::new(all, true)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.ids.is_empty() {
            return Err(SpectroError::InvalidArgument("empty token sequence".into()));
        }
        if self.ids.len() > config.max_seq_len {
            return Err(SpectroError::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                self.ids.len(),
                config.max_seq_len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= config.vocab_size) {
            return Err(SpectroError::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        Ok(())
    }

    /// Whether position `t` holds the BoS token.
    pub fn is_bos(&self, t: usize) -> bool {
        self.bos_prepended && t == 0
    }
}
