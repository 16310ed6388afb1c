//! Crate-wide error type.

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition (non-finite value,
    /// out-of-range rate, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A scenario or detector configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A text artifact (point cloud, scenario log, config file) failed
    /// to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
