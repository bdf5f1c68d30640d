use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("AU vector has length {got}, schema expects {expected}")]
    AuLength { expected: usize, got: usize },

    #[error("unknown preset `{name}` (known: {known})")]
    UnknownPreset { name: String, known: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("image not found or unreadable: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint digest mismatch for tensor `{0}`")]
    Digest(String),

    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
