// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by cloom operations.
#[derive(Debug, thiserror::Error)]
pub enum CloomError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown task tag `{0}`")]
    UnknownTask(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown word `{0}` in prompt")]
    UnknownWord(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("manifest disagrees with payload for `{name}`: {detail}")]
    ManifestMismatch { name: String, detail: String },

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("reference error: {0}")]
    Reference(String),

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("non-causal pair: {0}")]
    NonCausal(String),

    #[error("layer-count mismatch: model has {model} decoder layers, bank has {bank}")]
    LayerMismatch { model: usize, bank: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Result alias using [`CloomError`].
pub type Result<T> = std::result::Result<T, CloomError>;

impl CloomError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
