use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, got {got:?}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every tensor that requires a gradient")]
    DetachedGraph,

    #[error("degenerate transform: homogeneous denominator {denominator:e} at output pixel ({row}, {col})")]
    DegenerateTransform {
        denominator: f64,
        row: usize,
        col: usize,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("no valid placement within bounds after {attempts} attempts")]
    BoundsInfeasible { attempts: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: &'static str },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl Into<String>, got: &[usize]) -> Self {
        Error::Dimension {
            op,
            expected: expected.into(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
