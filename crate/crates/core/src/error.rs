use thiserror::Error;

/// Errors produced by the conformal machinery, the allocator and the harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("calibration data is empty")]
    EmptyCalibration,

    #[error("training data is empty")]
    EmptyTraining,

    #[error("evaluation data is empty")]
    EmptyEvaluation,

    #[error("miscoverage level {0} is outside (0, 1)")]
    InvalidAlpha(f64),

    #[error("prediction sets are incompatible: {0}")]
    IncompatibleSets(String),

    #[error("no allocation within the curve ranges sums to {alpha}: feasible totals are [{min}, {max}]")]
    InfeasibleAllocation { alpha: f64, min: f64, max: f64 },

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeError { expected: usize, got: usize },

    #[error("conformity score is NaN for scale {scale}, label {label}")]
    NanScore { scale: usize, label: usize },

    #[error("label {0} is not in the label space")]
    UnknownLabel(usize),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            reason: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
