use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecapError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RecapError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RecapError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short name used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            RecapError::Io { .. } => "io",
            RecapError::Parse { .. } => "parse",
            RecapError::Validation(_) => "validation",
            RecapError::Shape(_) => "shape",
            RecapError::Precondition(_) => "precondition",
            RecapError::Checkpoint(_) => "checkpoint",
            RecapError::Config(_) => "config",
            RecapError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, RecapError>;
