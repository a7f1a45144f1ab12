use thiserror::Error;

/// Errors raised by registration, acceleration and harness routines.
#[derive(Error, Debug)]
pub enum RegError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("count mismatch: expected {expected} points, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("no points")]
    NoPoints,

    #[error("correspondence collapse: posterior mass N_P = {np:e} assigned to mixture components")]
    CorrespondenceCollapse { np: f64 },

    #[error("linear solve produced non-finite values (condition estimate {condition:e})")]
    NonFiniteSolve { condition: f64 },

    #[error("inner Woodbury matrix is singular (condition estimate {condition:e})")]
    SingularInner { condition: f64 },

    #[error("variance update is negative ({value:e}) after compensated recomputation")]
    NegativeVariance { value: f64 },

    #[error("eigensolver did not converge: {converged} of {requested} eigenpairs converged")]
    EigenNonConvergence { converged: usize, requested: usize },

    #[error("missing-region removal left no points in {set}")]
    EmptyAfterRemoval { set: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RegError>;
