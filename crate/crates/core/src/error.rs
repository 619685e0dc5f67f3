// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors raised by spectro.
#[derive(Debug, thiserror::Error)]
pub enum SpectroError {
    /// A matrix or vector contained NaN or infinity where finite values are required.
    #[error("non-finite value in {what} at index {index}")]
    NonFinite {
        /// Which input was rejected.
        what: String,
        /// Flat index of the first offending entry.
        index: usize,
    },

    /// An iterative kernel ran out of its iteration budget.
    #[error("{algorithm} did not converge within {iterations} iterations")]
    Convergence {
        /// Name of the algorithm.
        algorithm: &'static str,
        /// Iteration budget that was exhausted.
        iterations: usize,
    },

    /// Operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A canonical filter or hook-site string failed to parse.
    #[error("cannot parse {kind} `{input}`: {reason}")]
    Parse {
        /// What was being parsed (`filter`, `site`, ...).
        kind: &'static str,
        /// The offending text.
        input: String,
        /// Why it was rejected.
        reason: String,
    },

    /// The checkpoint does not start with the `LSPC` magic bytes.
    #[error("bad magic bytes {found:?} (expected \"LSPC\")")]
    BadMagic {
        /// The first four bytes of the file.
        found: [u8; 4],
    },

    /// The checkpoint container version is not supported.
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    /// The JSON header or the byte layout of a container is malformed.
    #[error("malformed container: {0}")]
    Container(String),

    /// A required tensor is absent from a checkpoint.
    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    /// A tensor exists but its shape disagrees with the model configuration.
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        /// Tensor name.
        name: String,
        /// Shape stored in the container.
        found: Vec<usize>,
        /// Shape implied by the configuration.
        expected: Vec<usize>,
    },

    /// A checkpoint tensor holds NaN or infinity.
    #[error("tensor `{name}` holds a non-finite weight at flat index {index}")]
    NonFiniteWeight {
        /// Tensor name.
        name: String,
        /// Flat index of the first offending entry.
        index: usize,
    },

    /// The model configuration violates an invariant.
    #[error("invalid model config: {0}")]
    Config(String),

    /// A trace lacks a field that an analysis needs.
    #[error("trace is missing `{0}` (enable it in the TraceSpec)")]
    MissingCapture(&'static str),

    /// A report CSV could not be read.
    #[error("malformed report at row {row}: {reason}")]
    Report {
        /// 1-based data row (header is row 0).
        row: usize,
        /// Why the row was rejected.
        reason: String,
    },

    /// I/O failure tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        /// Path being read or written.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SpectroError>;

impl SpectroError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn parse(kind: &'static str, input: &str, reason: impl Into<String>) -> Self {
        Self::Parse { kind, input: input.to_owned(), reason: reason.into() }
    }
}
