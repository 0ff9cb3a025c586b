use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node {0} has zero variance")]
    ZeroVarianceNode(usize),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("empty vector")]
    EmptyVector,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error in {path}: {msg}")]
    ParseError { path: PathBuf, msg: String },

    #[error("subject {subject}: {reason}")]
    InvariantViolation { subject: String, reason: String },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("too few subjects: {0}")]
    TooFewSubjects(String),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("subgraph token {0} has zero norm")]
    ZeroNormToken(usize),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("computation graph cycle at node {0}")]
    GraphCycle(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("only one class present; AUC/SEN/SPE undefined")]
    SingleClassPresent,

    #[error("atlas labels missing or wrong length")]
    MissingAtlasLabels,

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than input data or usage.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteActivation(_)
            | Error::NonFiniteGradient(_)
            | Error::GraphCycle(_)
            | Error::ZeroNormToken(_) => true,
            Error::Fold { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// True for configuration / usage problems.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::UnknownKey(_) | Error::InvalidValue { .. })
    }
}
