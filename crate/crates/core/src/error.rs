//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not satisfy its
    /// contract. `op` names the operation, `detail` the offending dims.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A forward or backward pass produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// `backward` was called twice on the same recorded graph.
    #[error("backward called on an already-consumed graph")]
    GraphConsumed,

    /// A model configuration failed shape checking.
    #[error("invalid model config at layer {layer}: {detail}")]
    InvalidConfig { layer: usize, detail: String },

    /// Checkpoint encode/decode failure (bad magic, truncation, version).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset manifest problems (unknown labels, duplicates, missing files).
    #[error("manifest: {0}")]
    Manifest(String),

    /// Image decode/encode failure.
    #[error("image {path}: {detail}")]
    Image { path: String, detail: String },

    /// Invalid runtime configuration outside the model config proper.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    /// True when the error signals a numerical failure (NaN/Inf) rather than
    /// bad input data or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
