use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("rank {0} is outside 1..=4")]
    Rank(usize),
    #[error("shape {0:?} has an empty axis")]
    EmptyAxis(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: axis {axis} is not present in a rank-{rank} tensor")]
    AbsentAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any tracked tensor")]
    DisconnectedLoss,
    #[error("unknown variable id {0}")]
    UnknownVar(usize),
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

/// Crate-level error for everything above the tensor layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("audio: {0}")]
    Audio(String),
    #[error("mixing: {0}")]
    Mix(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training: {0}")]
    Train(String),
    #[error("metrics: {0}")]
    Metric(String),
    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: String },
    #[error("mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn missing(what: &'static str, path: impl AsRef<std::path::Path>) -> Self {
        Error::Missing {
            what,
            path: path.as_ref().display().to_string(),
        }
    }

    /// Stable identifier for command-line reporting.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "E_TENSOR",
            Error::Io { .. } => "E_IO",
            Error::MissingParam(_) | Error::ParamShape { .. } | Error::Checkpoint(_) => {
                "E_CHECKPOINT"
            }
            Error::Config(_) => "E_CONFIG",
            Error::Shape(_) => "E_SHAPE",
            Error::Audio(_) => "E_AUDIO",
            Error::Mix(_) => "E_MIX",
            Error::Data(_) => "E_DATA",
            Error::Train(_) => "E_TRAIN",
            Error::Metric(_) => "E_METRIC",
            Error::Missing { .. } => "E_MISSING",
            Error::Mismatch(_) => "E_MISMATCH",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
