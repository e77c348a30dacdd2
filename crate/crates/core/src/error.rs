use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the dataset pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("persistence error at {path}: {source}")]
    Persistence {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("insufficient data for class `{class}`: {message}")]
    InsufficientData { class: String, message: String },

    #[error("prompt parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("backend error from {endpoint} (status {status:?}): {message}")]
    Backend {
        endpoint: String,
        status: Option<u16>,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("label set mismatch: class `{class}` present in only one dataset")]
    LabelMismatch { class: String },

    #[error("unknown job `{0}`")]
    UnknownJob(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("job cancelled")]
    Cancelled,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Persistence {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn backend(endpoint: impl Into<String>, status: Option<u16>, message: impl Into<String>) -> Self {
        Error::Backend {
            endpoint: endpoint.into(),
            status,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
