use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar or configuration parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input data lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The input is well-formed but carries no usable information
    /// (constant region, all-zero image, empty population).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Misuse of a stateful API, e.g. backward without a matching forward.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot ingest {}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn ingest(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Ingestion {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
