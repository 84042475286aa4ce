use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched shapes between components.
    #[error("configuration error: {0}")]
    Config(String),

    /// A shape did not match what the component expects.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// Input with no defined direction (e.g. zero-norm power normalization).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// A pipeline stage needs an artifact produced by another stage.
    #[error("missing dependency for stage `{stage}`: {needed} not found at {}", path.display())]
    Dependency {
        stage: String,
        needed: String,
        path: PathBuf,
    },

    #[error("dataset ingestion failed: {reason}; offending files: {files:?}")]
    Ingestion { reason: String, files: Vec<PathBuf> },

    #[error("invalid config key(s): {keys:?}: {message}")]
    Validation { keys: Vec<String>, message: String },

    /// A restored image violates an invariant checked during evaluation.
    #[error("{method} output for {image} violates {invariant}: residual {residual:e}")]
    Invariant {
        method: String,
        image: String,
        invariant: String,
        residual: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
