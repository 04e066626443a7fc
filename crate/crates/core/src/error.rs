use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis} (expected {expected}, got {got})")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: degenerate input: {reason}")]
    DegenerateInput { op: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
