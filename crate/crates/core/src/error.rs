use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("degenerate embedding: cannot normalize a zero vector")]
    DegenerateEmbedding,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("manifest {path}, line {line}: {message}")]
    Manifest { path: PathBuf, line: u64, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}
