use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("stage matrix (I - zA) is singular at z = {z}")]
    SingularStageMatrix { z: f64 },

    #[error("tableau `{0}` is not explicit")]
    NotExplicit(String),

    #[error("unknown method name `{0}`")]
    UnknownMethodName(String),

    #[error("unknown flux name `{0}`")]
    UnknownFlux(String),

    #[error("invalid tableau: {0}")]
    InvalidTableau(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("nonphysical state in cell {cell}: {reason}")]
    NonphysicalState { cell: usize, reason: String },

    #[error("finite-difference direction has zero norm")]
    ZeroDirection,

    #[error("Jacobian is singular (pivot {pivot} at row {row})")]
    SingularJacobian { row: usize, pivot: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolveFailed(String),

    #[error("tableau `{0}` admits no v-vector for step extraction")]
    NoVVector(String),

    #[error("construction parameter must be nonzero")]
    ZeroParameter,

    #[error("Krylov monomial basis is numerically rank deficient (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("iteration trace is missing stage flux records")]
    MissingTrace,

    #[error("no reference solution available: {0}")]
    NoReferenceSolution(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("invalid configuration at `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig { key: key.into(), message: message.into() }
    }

    /// Attaches a cell index to a nonphysical-state error raised by a flux.
    pub fn at_cell(self, cell: usize) -> Self {
        match self {
            Error::NonphysicalState { reason, .. } => Error::NonphysicalState { cell, reason },
            other => other,
        }
    }
}
