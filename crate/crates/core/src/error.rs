//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or extent mismatch between tensors, cubes, or operator operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented precondition was violated (bad argument, wrong call order).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration values.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed serialized data. `offset` is the byte position of the first
    /// rejected field, so corrupt files are diagnosable.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Numeric failure during training or evaluation (non-finite loss, etc).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
