use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A caller broke a documented precondition (empty mask, zero heads, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("incomplete input: {0}")]
    Incomplete(String),

    #[error("wav: {0}")]
    Wav(#[from] WavError),

    #[error("corrupt model file: tensor `{tensor}`: {reason}")]
    Corrupt { tensor: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("zero-length payload")]
    EmptyPayload,
    #[error("channel {requested} out of range ({channels} channels)")]
    Channel { requested: usize, channels: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
