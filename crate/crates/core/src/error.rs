use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("objective is not finite at x = {x}")]
    NonFiniteObjective { x: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("{path}: row {row}: {message}")]
    Ingestion {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric(_) | Error::NonFiniteObjective { .. } => "numeric",
            Error::Argument(_) => "argument",
            Error::Generation(_) => "generation",
            Error::Ingestion { .. } => "ingestion",
            Error::Io { .. } => "io",
            Error::Partition(_) => "partition",
            Error::Protocol(_) => "protocol",
            Error::Round { source, .. } => source.kind(),
        }
    }

    pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::Dimension { expected, found })
        }
    }
}
