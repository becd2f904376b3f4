use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the engine, data, model, training and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidOperand { op: &'static str, reason: String },

    #[error("masked-average-pool: empty mask")]
    EmptyMask,

    #[error("backward: root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("grad-check: non-finite probe at parameter {param} element {element}")]
    NonFiniteProbe { param: usize, element: usize },

    #[error("placement infeasible: {0}")]
    PlacementInfeasible(String),

    #[error("catalog of {classes} classes cannot be split into {folds} folds")]
    IndivisibleCatalog { classes: usize, folds: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("protocol violation: train split of session {requested} requested during session {current}")]
    ProtocolViolation { requested: usize, current: usize },

    #[error("numeric blowup at layer {layer}")]
    NumericBlowup { layer: usize },

    #[error("empty support: every shot mask is empty")]
    EmptySupport,

    #[error("anchor missing for prototype of class {0}")]
    AnchorMissing(u32),

    #[error("unknown label {0}")]
    UnknownLabel(u8),

    #[error("empty target: every pixel is ignored")]
    EmptyTarget,

    #[error("duplicate class id {0}")]
    DuplicateClass(u32),

    #[error("diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("empty class set")]
    EmptyClassSet,

    #[error("negative input {0}")]
    NegativeInput(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corpus not found at {0}")]
    CorpusNotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidOperand {
            op,
            reason: reason.into(),
        }
    }
}
