//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Failure classes surfaced by the numeric core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Caller handed in something structurally wrong (shape mismatch,
    /// out-of-range hyperparameter, unknown name).
    InvalidArgument(String),
    /// Input is valid in shape but has no meaningful answer (empty tensor,
    /// zero norm, zero spread).
    DegenerateInput(String),
    /// A non-finite value appeared mid-computation; `path` names the tensor
    /// that tripped the check.
    NumericFailure { path: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::NumericFailure { path } => {
                write!(f, "numeric failure: non-finite value in {path}")
            }
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    /// Shorthand for an [`Error::InvalidArgument`] from format pieces.
    pub fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(alloc::format!("{msg}"))
    }

    /// Shorthand for an [`Error::DegenerateInput`] from format pieces.
    pub fn degenerate(msg: impl fmt::Display) -> Self {
        Error::DegenerateInput(alloc::format!("{msg}"))
    }

    /// Shorthand for an [`Error::NumericFailure`] at `path`.
    pub fn numeric(path: impl fmt::Display) -> Self {
        Error::NumericFailure { path: alloc::format!("{path}") }
    }
}
