use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation needs.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter or argument is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An operation was called in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// The command line or input layout is unusable as given.
    #[error("{0}")]
    Usage(String),

    /// Dataset or label content is unusable.
    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error on {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint holds architecture `{found}`, requested `{requested}`")]
    Compatibility { found: String, requested: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
