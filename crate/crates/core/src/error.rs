use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("truncated CIFAR-10 file {path}: record {index} is incomplete")]
    Truncated { path: PathBuf, index: usize },

    #[error("corrupt record {index}: label {label} is not a valid class")]
    CorruptRecord { index: usize, label: u8 },

    #[error("invalid occlusion spec: {0}")]
    InvalidOcclusion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("center set is empty")]
    EmptyCenters,

    #[error("training classifier {exclusion} failed: {source}")]
    Exclusion {
        exclusion: String,
        #[source]
        source: Box<Error>,
    },

    #[error("container format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
