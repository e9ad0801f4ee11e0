use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Error, Debug)]
pub enum CoirlError {
    /// Dimension mismatches, bad parameters, malformed specifications.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A context vector that is not on the probability simplex.
    #[error("invalid context: {0}")]
    InvalidContext(String),

    /// An iterative solver hit its iteration cap before reaching tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A mirror-descent update collapsed (e.g. zero-norm pre-projection iterate).
    #[error("degenerate descent step: {0}")]
    DegenerateStep(String),

    /// An ellipsoid cut with a zero or non-positive-curvature direction.
    #[error("degenerate ellipsoid cut: {0}")]
    DegenerateCut(String),

    /// Transfer method called on dynamics it does not support.
    #[error("unsupported dynamics: {0}")]
    UnsupportedDynamics(String),

    /// Operation on an object in an unusable state (e.g. empty policy library).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Numerical failure (loss of positive definiteness, NaN, singularity).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File or schema validation problems in the harness.
    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoirlError>;

impl CoirlError {
    /// Process exit code convention: 2 for validation problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoirlError::InvalidArgument(_)
            | CoirlError::InvalidContext(_)
            | CoirlError::InvalidState(_)
            | CoirlError::Validation(_)
            | CoirlError::Io(_)
            | CoirlError::Json(_) => 2,
            CoirlError::NonConvergence { .. }
            | CoirlError::DegenerateStep(_)
            | CoirlError::DegenerateCut(_)
            | CoirlError::UnsupportedDynamics(_)
            | CoirlError::Numerical(_) => 3,
        }
    }
}
