use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SatError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("no valid query: {0}")]
    NoValidQuery(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch}, queries {queries:?})")]
    NonFinite { step: u64, epoch: usize, batch: usize, queries: Vec<String> },

    #[error("run failed: {0}")]
    Run(String),
}

pub type Result<T, E = SatError> = std::result::Result<T, E>;

impl SatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SatError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SatError::Format { path: path.into(), msg: msg.into() }
    }
}
