//! Crate-wide error type.

use crate::network::Network;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor did not have the shape an operation required. `layer` is the
    /// index of the offending layer where applicable.
    #[error("shape mismatch at layer {layer} ({kind}): {detail}")]
    ShapeMismatch {
        layer: usize,
        kind: &'static str,
        detail: String,
    },

    /// Invalid argument outside of the layer pipeline.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// An authorization key is inconsistent with the network it is applied to.
    #[error("key/network mismatch at lockable layer {layer}: {detail}")]
    KeyMismatch { layer: usize, detail: String },

    /// A class label outside `[0, num_classes)`.
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// Training produced a non-finite loss. Carries the most recent
    /// finite-loss snapshot of the model.
    #[error("training diverged during epoch {epoch}: {detail}")]
    Divergence {
        epoch: usize,
        detail: String,
        last_good: Box<Network>,
    },

    /// A file (checkpoint, dataset, key file) failed to parse. `offset` is the
    /// byte position at which the problem was detected.
    #[error("{path}: format error at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Sealed-key authentication failed: wrong passphrase or corrupted file.
    /// No plaintext is ever released on this path.
    #[error("key authentication failed: {0}")]
    Auth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: usize, kind: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            layer,
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: &std::path::Path, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            offset,
            detail: detail.into(),
        }
    }
}
