use chrono::NaiveDate;
use thiserror::Error;

/// Crate-wide error type. Variants fall into three failure classes that the
/// CLI maps onto process exit codes: usage/config problems (1), bad or
/// insufficient data (2), and numerical failures such as divergence (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse {path} row {row}: {msg}")]
    Parse { path: String, row: usize, msg: String },
    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),
    #[error("schema: {0}")]
    Schema(String),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
