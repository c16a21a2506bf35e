use alloc::string::String;
use core::fmt;

/// Error type shared by all rate-math operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// An argument violated a documented precondition (bad shape, negative
    /// rate, non-finite value, out-of-range time...).
    InvalidArgument(String),
    /// The operation was called in a state it does not support.
    FailedPrecondition(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::FailedPrecondition(msg) => write!(f, "failed precondition: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidArgument(msg.into())
}
