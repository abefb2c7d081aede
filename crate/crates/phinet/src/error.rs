//! Error types shared across the crate.

/// Crate-wide error type.
///
/// The variants map onto the CLI exit codes: `Config` is a usage/configuration
/// problem (exit 1), `Numerical` is a numerical failure such as a non-finite
/// activation (exit 2), and `Io`/`Format` are I/O or file-format problems
/// (exit 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: String, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
