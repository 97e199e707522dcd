use std::path::PathBuf;

use lidarflow_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("non-finite loss at iteration {iter} in term {term}")]
    NonFiniteLoss { iter: usize, term: String },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
