use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: treatment must be 0 or 1, found `{value}`")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("row {row}, column `{col}`: non-finite value")]
    NonFiniteValue { row: usize, col: String },
    #[error("row {row}, column `{col}`: missing value")]
    MissingValue { row: usize, col: String },
    #[error("row {row}, column `{col}`: cannot parse `{value}` as a number")]
    InvalidNumber { row: usize, col: String, value: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid data-generating process: {0}")]
    InvalidSpec(String),
    #[error("too few units: need at least {needed}, have {have}")]
    TooFewUnits { needed: usize, have: usize },
    #[error("could not draw folds with both treatment arms in every fold after {attempts} attempts")]
    DegenerateFold { attempts: usize },
    #[error("treatment indicator takes a single value in the training set")]
    SingleClass,
    #[error("treatment arm {arm} has no units in the training set")]
    EmptyArm { arm: u8 },
    #[error("degenerate design matrix: {0}")]
    DegenerateDesign(String),
    #[error("value outside its domain: {0}")]
    DomainError(String),
    #[error("ground truth required but not available")]
    NoGroundTruth,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite reward at step {step}")]
    NonFiniteReward { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DegenerateDesign(_) | Error::NonFiniteReward { .. } => ErrorClass::Numerical,
            Error::Fold { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Error {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
