use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (e.g. σ ≤ 0).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },

    /// Inconsistent dimensions or invalid hyperparameters.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed, truncated or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Operation not allowed in the current state (e.g. stepping a finished episode).
    #[error("usage error: {0}")]
    Usage(String),

    /// Data-dependent failure, such as an expert too weak to collect demonstrations.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
