use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("forward cache does not match the network it is used with")]
    StaleCache,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad IDX file: {0}")]
    Idx(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("sample store: {0}")]
    Store(String),

    #[error("empty selection pool: {0}")]
    EmptyPool(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("{0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
