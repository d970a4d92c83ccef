use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure raised by a detector, mask generator or propagator backend.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{backend}: {message}")]
pub struct BackendError {
    pub backend: String,
    pub message: String,
}

impl BackendError {
    pub fn new(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Self { backend: backend.into(), message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("mask dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("propagation of batch {batch} (objects {object_ids:?}) from frame {frame} failed: {source}")]
    Propagation {
        batch: usize,
        frame: usize,
        object_ids: Vec<u64>,
        #[source]
        source: BackendError,
    },

    #[error("resource budget exceeded: {used} frame-object entries > limit {limit}")]
    BudgetExceeded { used: u64, limit: u64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: u64, reason: String },

    #[error("frame ranges are misaligned: {0}")]
    Misaligned(String),

    #[error("processing interrupted after frame {0}")]
    Interrupted(usize),

    #[error("full and chunk processing both failed (chunk error: {reason}); last checkpoint: {}", checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    BothModesFailed { reason: String, checkpoint: Option<PathBuf> },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code grouping errors by category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::Geometry(_)
            | Error::DimensionMismatch { .. }
            | Error::Misaligned(_) => 4,
            Error::Backend(_)
            | Error::Propagation { .. }
            | Error::BudgetExceeded { .. }
            | Error::BothModesFailed { .. } => 5,
            Error::Checkpoint { .. } => 6,
            Error::Interrupted(_) => 7,
        }
    }
}
