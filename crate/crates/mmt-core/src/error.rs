use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's precondition.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API contract was violated (non-scalar loss, empty input, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// An index (token id, axis, ...) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A file did not parse as the expected on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Parallel corpus files disagree on line counts.
    #[error("alignment error: source has {src} lines, target has {tgt} lines")]
    Alignment { src: usize, tgt: usize },

    /// A configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
