use thiserror::Error;

pub type Result<T> = std::result::Result<T, FmtError>;

#[derive(Debug, Error)]
pub enum FmtError {
    #[error("invalid mesh geometry: {0}")]
    InvalidGeometry(String),

    #[error("degenerate element {index}: signed volume {volume:e}")]
    DegenerateElement { index: usize, volume: f64 },

    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("system matrix is not symmetric positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("all measurements are masked; check detector geometry and sources")]
    AllMasked,

    #[error("non-finite value in iterate at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("illumination pattern has no active lasers")]
    EmptyPattern,

    #[error("infeasible illumination pattern: {0}")]
    InfeasiblePattern(String),

    #[error("config error at {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FmtError>,
    },

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FmtError {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        FmtError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(FmtError::LengthMismatch {
                what,
                expected,
                actual,
            })
        }
    }
}
