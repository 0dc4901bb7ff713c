use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("adapter/model mismatch: {0}")]
    AdapterMismatch(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset coverage violation: {0}")]
    Coverage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn non_finite(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn adapter(msg: impl Into<String>) -> Self {
        Error::AdapterMismatch(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn coverage(msg: impl Into<String>) -> Self {
        Error::Coverage(msg.into())
    }
}
