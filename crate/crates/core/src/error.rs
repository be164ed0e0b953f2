use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value in {what} at step {step}")]
    Numeric { what: String, step: usize },

    #[error("unsupported ssm mode: {0}")]
    UnsupportedMode(String),

    #[error("sequence of length {len} exceeds positional capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("annotation line {line}: {reason}")]
    Annotation { line: usize, reason: String },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("unknown {kind} `{name}` (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed files or inputs on disk.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Load(_)
                | Error::Annotation { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Capacity { .. }
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
