use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Adherence and consistency are undefined on malformed output.
    #[error("trajectory is not well-formed")]
    InvalidTrajectory,

    #[error("invalid config field `{field}`{}: {reason}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    InvalidConfig {
        field: String,
        line: Option<usize>,
        reason: String,
    },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("token {token} outside the alphabet of slot {slot} (size {size})")]
    TokenOutOfRange { slot: usize, token: usize, size: usize },

    #[error("trajectory has {got} tokens, the slot layout needs {expected}")]
    BadTokenCount { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("derivation table line {line}: {reason}")]
    TableParse { line: usize, reason: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("{0} holds no complete run")]
    Incomplete(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            line: None,
            reason: reason.into(),
        }
    }

    /// Errors in what the user asked for, as opposed to failures while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig { .. } | Error::TableParse { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
