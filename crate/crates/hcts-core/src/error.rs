//! Error taxonomy shared by every module.
//!
//! The three kinds map onto the stable process exit codes of the CLI:
//! usage errors exit 1, data errors exit 2, numeric failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a contract: bad arguments, mismatched manifolds,
    /// broken invariants such as a nonzero first transform row.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data is missing, unreadable, or structurally invalid.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI contract (1 usage, 2 data, 3 numeric).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
