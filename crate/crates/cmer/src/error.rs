//! Crate-wide error type. `Numeric` maps to exit code 2 at the CLI; all other
//! variants are validation or environment failures (exit 1).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("manifest {path} line {line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Autodiff(#[from] cmer_autodiff::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
