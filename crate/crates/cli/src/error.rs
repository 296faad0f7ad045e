use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] fedfta_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Output { .. } => "output",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (key, round) = match self {
            CliError::Config { key, .. } => (Some(key.clone()), None),
            CliError::Core(fedfta_core::Error::Round { round, .. }) => (None, Some(*round)),
            _ => (None, None),
        };
        ErrorRecord {
            kind: self.kind(),
            message: self.to_string(),
            key,
            round,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

/// Machine-readable failure description written on nonzero exit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
}
