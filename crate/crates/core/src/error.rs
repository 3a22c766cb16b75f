use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ForaError>;

/// Everything that can go wrong across the library.
///
/// Variants are grouped by how the CLI reports them: configuration and
/// precondition problems map to exit code 2, numerical aborts to exit code 3,
/// I/O failures to exit code 1.
#[derive(Debug, Error)]
pub enum ForaError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("loss must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("matrix is not skew-symmetric (max |W + Wᵀ| = {0:e})")]
    NotSkew(f64),

    #[error("Cayley fixed-point iteration diverged at iteration {iteration}; use a smaller step size")]
    FixedPointDivergence { iteration: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("effective rank is undefined for an all-zero spectrum")]
    ZeroSpectrum,

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("k = {k} is out of range 1..={n_layers}")]
    KOutOfRange { k: usize, n_layers: usize },

    #[error("rank {r} is too large for slot {slot} ({d_out}x{d_in})")]
    RankTooLarge {
        r: usize,
        slot: String,
        d_out: usize,
        d_in: usize,
    },

    #[error("adapter at {slot} has shape mismatch: {detail}")]
    AdapterShape { slot: String, detail: String },

    #[error("parameter budget mismatch across matched arms: {0}")]
    BudgetMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ForaError {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ForaError::NonFinite(_)
            | ForaError::FixedPointDivergence { .. }
            | ForaError::NonFiniteLoss { .. }
            | ForaError::RankDeficient { .. }
            | ForaError::ZeroSpectrum => 3,
            ForaError::Io(_) | ForaError::Csv(_) => 1,
            _ => 2,
        }
    }
}
