use thiserror::Error;

/// Errors raised anywhere in the codec, training, or file-format layers.
#[derive(Debug, Error)]
pub enum DcaeError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric integrity error in `{name}`: {detail}")]
    Integrity { name: String, detail: String },
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DcaeError {
    pub fn dim(msg: impl Into<String>) -> Self {
        DcaeError::Dimension(msg.into())
    }

    pub fn integrity(name: impl Into<String>, detail: impl Into<String>) -> Self {
        DcaeError::Integrity {
            name: name.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DcaeError>;
