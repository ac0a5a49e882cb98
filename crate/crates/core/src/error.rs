use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PaeError>;

#[derive(Debug, Error)]
pub enum PaeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value at stage `{stage}`")]
    Numeric { stage: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("state mismatch: {0}")]
    Mismatch(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PaeError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        PaeError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PaeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PaeError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
