use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("negative timestamp {t} for account {account} (line {line})")]
    NegativeTimestamp { account: String, t: f64, line: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown account index {0}")]
    UnknownAccount(usize),

    #[error("non-stationary Hawkes parameters: spectral radius of alpha/beta is {0:.4}")]
    NonStationary(f64),

    #[error("enumeration too large: {groups}^{nodes} assignments exceeds {limit}")]
    TooLarge { groups: usize, nodes: usize, limit: usize },

    #[error("degenerate embeddings: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ambiguous coordinated group: {0}")]
    Ambiguous(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
