use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the merging toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Two parameter containers (or matrices) disagree on layout.
    #[error("shape mismatch at `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    /// A configuration value violates its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or missing data (datasets, checkpoints, batches).
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value was produced or a solver could not proceed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
