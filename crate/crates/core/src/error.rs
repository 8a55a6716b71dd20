use std::io;

/// Errors surfaced by every layer of the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid groups: {0}")]
    InvalidGroups(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("timescale delta must be strictly positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("sequence length {got} does not match {h}x{w}")]
    LengthMismatch { got: usize, h: usize, w: usize },
    #[error("channels {channels} not divisible by reduction {reduction}")]
    InvalidReduction { channels: usize, reduction: usize },
    #[error("value outside its domain: {0}")]
    DomainError(String),
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing modality: {0}")]
    MissingModality(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
