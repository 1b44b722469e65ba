//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors produced by numeric operations and the training loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape mismatch; the message names the offending operation.
    Dim(String),
    /// Invalid parameter value (negative sigma, alpha < 1, batch too large, ...).
    Param(String),
    /// Invalid numeric input (off-simplex vector, non-probability rows, ...).
    Input(String),
    /// Operation called in the wrong order (backward without a forward pass, ...).
    State(&'static str),
    /// Invalid training configuration, detected before step 0.
    Config(String),
    /// Degenerate geometry: zero gradient under the `Error` policy, or
    /// linearly dependent surface anchors.
    Degenerate(&'static str),
    /// Non-finite loss during training; reports the last step that was finite.
    Numeric { last_good_step: u64, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::Param(msg) => write!(f, "parameter error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Numeric { last_good_step, message } => {
                write!(f, "numerical failure after step {last_good_step}: {message}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
