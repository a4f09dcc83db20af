use alloc::string::String;

/// Errors produced by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input data violates a documented contract (shapes, ranges, flags).
    #[error("validation error: {0}")]
    Validation(String),
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Numerical breakdown during optimization.
    #[error("numerical error: {0}")]
    Numerical(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
