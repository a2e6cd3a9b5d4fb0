use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract
    /// (shape mismatch, out-of-range value, inconsistent dimensions).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset loading or fold construction failed.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint could not be read, written, or matched to the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Bad command-line usage (invalid flags, out-of-bounds prompt point).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Contract(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Checkpoint(_) => 4,
        }
    }
}
