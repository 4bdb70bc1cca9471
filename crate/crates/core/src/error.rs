use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("singular geometry: {0}")]
    Singularity(String),

    #[error("near-degenerate levels {level} and {other}: gap {gap:e} MHz below threshold {threshold:e} MHz")]
    Degenerate {
        level: usize,
        other: usize,
        gap: f64,
        threshold: f64,
    },

    #[error("Hilbert space dimension {dimension} exceeds capacity {capacity}")]
    Capacity { dimension: usize, capacity: usize },

    #[error("engine error: {0}")]
    Engine(String),

    #[error("cluster {indices:?}: {source}")]
    InCluster {
        indices: Vec<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Config(_) => 2,
            Error::Io(_) => 2,
            _ => 3,
        }
    }
}
