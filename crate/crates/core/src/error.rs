use std::path::PathBuf;

/// Errors raised by the tuning laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A computation produced or received a non-finite or invalid number.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Scheduler state is internally inconsistent.
    #[error("state corruption: {0}")]
    StateCorruption(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}:{line}: {message}", path.display())]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
