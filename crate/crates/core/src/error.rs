use thiserror::Error;

/// Crate-wide error type, grouped by failure class so callers (notably the
/// CLI) can map errors onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed, missing, or referentially inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: rank deficiency, non-convergence, degenerate inference.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for this error class (0 is success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
