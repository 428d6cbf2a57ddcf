use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error categories shared by every pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("attention row {row} has every key masked")]
    DegenerateMask { row: usize },

    #[error("training diverged at step {step}: {detail}")]
    TrainingDivergence { step: usize, detail: String },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("ingestion error for entry `{entry}`: {detail}")]
    Ingestion { entry: String, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("provider timed out after {0:.3} s")]
    Timeout(f64),

    #[error("provider error: {0}")]
    Provider(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn empty(msg: impl Into<String>) -> Self {
        Error::EmptyInput(msg.into())
    }

    /// Short category name, used by the CLI for its exit message.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::EmptyInput(_) => "empty-input",
            Error::Alignment(_) => "alignment",
            Error::Lookup(_) => "lookup",
            Error::State(_) => "state",
            Error::DegenerateMask { .. } => "degenerate-mask",
            Error::TrainingDivergence { .. } => "training-divergence",
            Error::Vocabulary(_) => "vocabulary",
            Error::Ingestion { .. } => "ingestion",
            Error::Format { .. } => "format",
            Error::Timeout(_) => "timeout",
            Error::Provider(_) => "provider",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
        }
    }
}
