use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, out-of-range
    /// argument, non-finite input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration (unknown block name, missing prior components, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// File parsing or I/O failure.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for contract-violation errors.
pub fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

/// Shorthand for configuration errors.
pub fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
