use diffsearch_autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AdError),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{what}: {msg} at byte offset {offset}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("architecture mismatch on field `{field}`: checkpoint has {found}, expected {expected}")]
    ArchMismatch {
        field: &'static str,
        found: String,
        expected: String,
    },
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
