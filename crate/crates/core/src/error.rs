use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A state with no samples; carries the one-based state label when known.
    #[error("empty state{}", .0.map(|k| format!(" {k}")).unwrap_or_default())]
    EmptyState(Option<usize>),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("covariance is not positive definite after jitter escalation")]
    NotPositiveDefinite,

    #[error("transition observed on structurally forbidden entry ({from},{to})")]
    ForbiddenTransition { from: usize, to: usize },

    #[error("label {label} out of range 1..={k}")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("instance too large: {0} state paths")]
    InstanceTooLarge(f64),

    #[error("AUC undefined: {0}")]
    AucUndefined(&'static str),

    #[error("zero normalization std")]
    ZeroNormalizationStd,

    #[error("non-finite likelihood during EM at iteration {0}")]
    NonFiniteLikelihood(usize),

    #[error("{path}: row {row} (line {line}): {msg}")]
    Csv {
        path: PathBuf,
        row: usize,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("model kind mismatch: expected {expected}, found {found}")]
    ModelKindMismatch { expected: String, found: String },

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than an internal failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(_) | Error::NotPositiveDefinite | Error::NonFiniteLikelihood(_) => false,
            Error::Fold { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}
