use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("input sequence is empty")]
    EmptySequence,

    #[error("sequence length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("attention is disabled for this model")]
    AttentionDisabled,

    #[error("query identity {0} is absent from the gallery")]
    IdentityMissing(u32),

    #[error("comparator `{0}` has no score")]
    MissingComparator(String),

    #[error("frame {got} is not after frame {last}")]
    FrameOrderViolation { last: u64, got: u64 },

    #[error("graph has {vertices} vertices, above the solver cap of {cap}")]
    SizeLimit { vertices: usize, cap: usize },

    #[error("ground truth is empty")]
    EmptyGroundTruth,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid scenario: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(expected: impl ToString, got: impl ToString) -> Error {
    Error::DimensionMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
