use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate value: {0}")]
    Degenerate(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("accumulator overflow in layer `{layer}`: {value} does not fit in {bits} signed bits")]
    Overflow { layer: String, value: i64, bits: u32 },

    #[error("training diverged at {stage} epoch {epoch}: {reason}")]
    Diverged {
        stage: String,
        epoch: usize,
        reason: String,
    },

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
