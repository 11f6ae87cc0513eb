use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("corrupt mask: {0}")]
    CorruptMask(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("could not place {wanted} objects after {attempts} attempts")]
    PlacementFailure { wanted: usize, attempts: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("prompt ({x}, {y}) lies outside the {w}x{h} image")]
    InvalidPrompt { x: usize, y: usize, w: usize, h: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::InvalidDimensions(msg.into())
    }
}
