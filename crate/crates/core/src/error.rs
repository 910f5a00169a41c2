use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsrError {
    /// Tensor extents do not line up for an operation.
    #[error("dimension mismatch in {op}: axis `{axis}` expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Caller violated a documented precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl AsrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        AsrError::Dimension {
            op,
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        AsrError::Shape { op, msg: msg.into() }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            AsrError::Dimension { .. }
                | AsrError::Shape { .. }
                | AsrError::Contract(_)
                | AsrError::Config(_)
                | AsrError::Toml(_)
        )
    }
}

pub type Result<T, E = AsrError> = std::result::Result<T, E>;
