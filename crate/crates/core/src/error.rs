//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes of the localization pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Dimension(String),
    /// Invalid configuration value (even kernel width, H not dividing the
    /// embedding dim, empty ranges, ...).
    Config(String),
    /// A caller-side contract violation (non-scalar loss, k out of range,
    /// empty class set, non-normalized probabilities, ...).
    Contract(String),
    /// A forward op produced NaN or Inf.
    NonFinite(String),
    /// Synthetic generation could not satisfy the configuration.
    Generation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
