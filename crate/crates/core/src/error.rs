use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// An input violated a documented invariant. The message names it.
    #[error("validation: {0}")]
    Validation(String),

    /// Tensor shapes disagree; message names the axes involved.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or other numerical breakdown, with diagnostics.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Artifacts built against different base weights or schedules.
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    /// Template filtering rejected every candidate.
    #[error("filter exhausted: {0}")]
    FilterExhausted(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// A required upstream artifact is missing; names the command that makes it.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CoreError::Format { path: path.into(), msg: msg.into() }
    }
}
