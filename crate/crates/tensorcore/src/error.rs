use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value produced by {op} at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}
