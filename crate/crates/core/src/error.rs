use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("{path}: format error at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("dataset error ({message}) for samples: {}", sample_ids.join(", "))]
    Dataset {
        message: String,
        sample_ids: Vec<String>,
    },

    #[error("token id {token} out of vocabulary (size {vocab})")]
    Vocabulary { token: u32, vocab: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("infeasible selection: k={k} with n={n} tokens")]
    InfeasibleSelection { k: usize, n: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: i64, classes: usize },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}
