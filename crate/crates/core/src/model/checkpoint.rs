// SPDX-License-Identifier: MIT OR Apache-2.0

//! The LSPC checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   "LSPC"                 4 bytes
//! offset 4   version = 1            u32
//! offset 8   header_len             u64
//! offset 16  header                 header_len bytes of UTF-8 JSON
//! ...        data section           row-major f32 tensors
//! ```
//!
//! The header is a JSON object with a `config` entry (a [`ModelConfig`])
//! and one entry per tensor: `{"dtype": "f32", "shape": [..], "offset": o,
//! "nbytes": n}`, where `offset` is relative to the start of the data
//! section. Tensor names: `embed`, `unembed`, `final_norm`, and
//! `layer.{i}.{attn_norm|mlp_norm|wq|wk|wv|wo|w1|w2|w3}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelBundle, ModelConfig};
use crate::error::{Result, SpectroError};
use crate::linalg::Matrix;

pub const LSPC_MAGIC: [u8; 4] = *b"LSPC";
pub const LSPC_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// Parsed JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl ContainerHeader {
    /// Parses the preamble and JSON header from the start of a file.
    /// Only the first `16 + header_len` bytes are needed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < PREAMBLE {
            let mut found = [0u8; 4];
            found[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
            if found != LSPC_MAGIC {
                return Err(SpectroError::BadMagic { found });
            }
            return Err(SpectroError::Container(format!(
                "file of {} bytes is shorter than the 16-byte preamble",
                bytes.len()
            )));
        }
        let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if found != LSPC_MAGIC {
            return Err(SpectroError::BadMagic { found });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != LSPC_VERSION {
            return Err(SpectroError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                SpectroError::Container(format!(
                    "header of {header_len} bytes at offset 16 runs past end of file ({} bytes)",
                    bytes.len()
                ))
            })?;
        let text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
            .map_err(|e| SpectroError::Container(format!("header is not UTF-8: {e}")))?;
        let mut object: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| SpectroError::Container(format!("header JSON: {e}")))?;
        let config =
            object.remove("config").ok_or_else(|| SpectroError::Container("header has no `config` entry".into()))?;
        let config: ModelConfig =
            serde_json::from_value(config).map_err(|e| SpectroError::Container(format!("config: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, value) in object {
            let entry: TensorEntry =
                serde_json::from_value(value).map_err(|e| SpectroError::Container(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, entry);
        }
        Ok((Self { config, tensors }, header_end))
    }

    fn to_json(&self) -> Result<String> {
        let mut object = serde_json::Map::new();
        object.insert("config".into(), serde_json::to_value(&self.config)?);
        for (name, entry) in &self.tensors {
            object.insert(name.clone(), serde_json::to_value(entry)?);
        }
        Ok(serde_json::to_string(&object)?)
    }
}

/// A named `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { shape: vec![m.rows(), m.cols()], data: m.data().iter().map(|&v| v as f32).collect() }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self { shape: vec![v.len()], data: v.iter().map(|&x| x as f32).collect() }
    }

    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// In-memory image of an LSPC file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, RawTensor>,
}

impl Container {
    /// Serializes with tensors laid out contiguously in name order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let numel: usize = t.shape.iter().product();
            if numel != t.data.len() {
                return Err(SpectroError::Shape(format!(
                    "tensor `{name}` has shape {:?} but {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            let nbytes = 4 * numel as u64;
            entries.insert(name.clone(), TensorEntry { dtype: "f32".into(), shape: t.shape.clone(), offset, nbytes });
            offset += nbytes;
        }
        let header = ContainerHeader { config: self.config.clone(), tensors: entries }.to_json()?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(&LSPC_MAGIC);
        out.extend_from_slice(&LSPC_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, data_start) = ContainerHeader::parse(bytes)?;
        let data = &bytes[data_start..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, entry) in &header.tensors {
            if entry.dtype != "f32" {
                return Err(SpectroError::Container(format!(
                    "tensor `{name}` has dtype `{}`; only f32 is supported",
                    entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.nbytes != 4 * numel as u64 {
                return Err(SpectroError::Container(format!(
                    "tensor `{name}`: shape {:?} needs {} bytes, header says {}",
                    entry.shape,
                    4 * numel,
                    entry.nbytes
                )));
            }
            let end = entry.offset.checked_add(entry.nbytes).filter(|&e| e <= data.len() as u64);
            let Some(end) = end else {
                return Err(SpectroError::Container(format!(
                    "tensor `{name}` spans bytes {}..{} of the data section (absolute offset {}), \
                     past its end ({} bytes)",
                    entry.offset,
                    entry.offset.saturating_add(entry.nbytes),
                    data_start as u64 + entry.offset,
                    data.len()
                )));
            };
            spans.push((entry.offset, end, name));
            let raw = &data[entry.offset as usize..end as usize];
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(name.clone(), RawTensor { shape: entry.shape.clone(), data: values });
        }
        spans.sort();
        for pair in spans.windows(2) {
            let (_, end_a, a) = pair[0];
            let (start_b, _, b) = pair[1];
            if start_b < end_a {
                return Err(SpectroError::Container(format!(
                    "tensors `{a}` and `{b}` overlap at data offset {start_b}"
                )));
            }
        }
        Ok(Self { config: header.config, tensors })
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| SpectroError::io(path, e))?;
    Container::from_bytes(&bytes)
}

pub fn save_container(container: &Container, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, container.to_bytes()?).map_err(|e| SpectroError::io(path, e))
}

/// Every tensor name a container for `config` must hold.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embed".into(), "unembed".into(), "final_norm".into()];
    for i in 0..config.n_layers {
        for field in ["attn_norm", "mlp_norm", "wq", "wk", "wv", "wo", "w1", "w2", "w3"] {
            names.push(format!("layer.{i}.{field}"));
        }
    }
    names
}

/// Weights exactly as stored, with separate RMSNorm scale vectors.
#[derive(Debug, Clone)]
pub struct UnabsorbedWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub unembed: Matrix,
    pub final_norm: Vec<f64>,
    pub attn_norms: Vec<Vec<f64>>,
    pub mlp_norms: Vec<Vec<f64>>,
    pub layers: Vec<LayerWeights>,
}

impl UnabsorbedWeights {
    /// Validates names, shapes, and finiteness.
    pub fn from_container(c: &Container) -> Result<Self> {
        let config = c.config.clone();
        config.validate()?;
        let d = config.d_model;

        let fetch = |name: &str, expected: Vec<usize>| -> Result<Vec<f64>> {
            let t = c.tensors.get(name).ok_or_else(|| SpectroError::MissingTensor(name.to_owned()))?;
            if t.shape != expected {
                return Err(SpectroError::TensorShape { name: name.to_owned(), found: t.shape.clone(), expected });
            }
            if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(SpectroError::NonFiniteWeight { name: name.to_owned(), index });
            }
            Ok(t.to_f64())
        };
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::new(rows, cols, fetch(name, vec![rows, cols])?)
        };

        for name in tensor_names(&config) {
            if !c.tensors.contains_key(&name) {
                return Err(SpectroError::MissingTensor(name));
            }
        }

        let (v, m) = (config.vocab_size, config.d_mlp);
        let (qw, kvw) = (config.q_width(), config.kv_width());
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut attn_norms = Vec::with_capacity(config.n_layers);
        let mut mlp_norms = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |f: &str| format!("layer.{i}.{f}");
            attn_norms.push(fetch(&p("attn_norm"), vec![d])?);
            mlp_norms.push(fetch(&p("mlp_norm"), vec![d])?);
            layers.push(LayerWeights {
                wq: matrix(&p("wq"), d, qw)?,
                wk: matrix(&p("wk"), d, kvw)?,
                wv: matrix(&p("wv"), d, kvw)?,
                wo: matrix(&p("wo"), qw, d)?,
                w1: matrix(&p("w1"), d, m)?,
                w2: matrix(&p("w2"), m, d)?,
                w3: matrix(&p("w3"), d, m)?,
            });
        }
        Ok(Self {
            embed: matrix("embed", v, d)?,
            unembed: matrix("unembed", v, d)?,
            final_norm: fetch("final_norm", vec![d])?,
            attn_norms,
            mlp_norms,
            layers,
            config,
        })
    }

    /// Folds every norm scale into the matrices that read the normalized
    /// vector: `(x ⊙ g) W = x (diag(g) W)`, so the pre-attention scale
    /// multiplies the `d`-indexed rows of `W_q`, `W_k`, `W_v`, the pre-MLP
    /// scale those of `W_1`, `W_3`, and the final scale the `d`-indexed
    /// columns of `W_u`.
    pub fn absorb(self) -> Result<ModelBundle> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for ((layer, g_attn), g_mlp) in self.layers.into_iter().zip(&self.attn_norms).zip(&self.mlp_norms) {
            layers.push(LayerWeights {
                wq: layer.wq.scale_rows(g_attn)?,
                wk: layer.wk.scale_rows(g_attn)?,
                wv: layer.wv.scale_rows(g_attn)?,
                wo: layer.wo,
                w1: layer.w1.scale_rows(g_mlp)?,
                w2: layer.w2,
                w3: layer.w3.scale_rows(g_mlp)?,
            });
        }
        let unembed = self.unembed.scale_columns(&self.final_norm)?;
        ModelBundle::from_absorbed(self.config, self.embed, unembed, layers)
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = BTreeMap::new();
        tensors.insert("embed".into(), RawTensor::from_matrix(&self.embed));
        tensors.insert("unembed".into(), RawTensor::from_matrix(&self.unembed));
        tensors.insert("final_norm".into(), RawTensor::from_vector(&self.final_norm));
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |f: &str| format!("layer.{i}.{f}");
            tensors.insert(p("attn_norm"), RawTensor::from_vector(&self.attn_norms[i]));
            tensors.insert(p("mlp_norm"), RawTensor::from_vector(&self.mlp_norms[i]));
            for (field, m) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
                ("w1", &layer.w1),
                ("w2", &layer.w2),
                ("w3", &layer.w3),
            ] {
                tensors.insert(p(field), RawTensor::from_matrix(m));
            }
        }
        Container { config: self.config.clone(), tensors }
    }
}

impl ModelBundle {
    /// A container for this bundle with unit norm scales (the scales are
    /// already inside the weights).
    pub fn to_container(&self) -> Container {
        let d = self.config.d_model;
        let n = self.config.n_layers;
        UnabsorbedWeights {
            config: self.config.clone(),
            embed: self.embed.clone(),
            unembed: self.unembed.clone(),
            final_norm: vec![1.0; d],
            attn_norms: vec![vec![1.0; d]; n],
            mlp_norms: vec![vec![1.0; d]; n],
            layers: self.layers.clone(),
        }
        .to_container()
    }
}

/// Reads an LSPC file and returns a bundle with norm scales absorbed.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let container = read_container(path)?;
    UnabsorbedWeights::from_container(&container)?.absorb()
}
