use thiserror::Error;

use crate::projector::IterationTrace;

/// Errors raised by the slow-manifold toolkit.
#[derive(Debug, Error)]
pub enum SlowError {
    /// A precondition on user-supplied values was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A quantity left the domain where the formula is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Integration or iteration produced a non-finite state.
    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    /// The functional iteration produced a non-finite iterate. Carries the
    /// trace recorded up to the failure.
    #[error("iteration diverged at iterate {}: non-finite value", .trace.iterates.len())]
    IterationDiverged { trace: Box<IterationTrace> },

    /// A matrix that must be invertible was (numerically) singular.
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    /// Newton iteration for a root failed.
    #[error("root finding failed: {0}")]
    RootFinding(String),

    /// Finite-difference step lost all precision.
    #[error("precision loss: {0}")]
    Precision(String),

    /// Dense eigen/Schur computations failed.
    #[error("numerical linear algebra failure: {0}")]
    Numerical(String),

    /// Bisection bracket does not straddle a transition.
    #[error("bracket error: {0}")]
    Bracket(String),

    /// Too few usable points for a regression.
    #[error("fit error: {0}")]
    Fit(String),
}

pub type Result<T> = std::result::Result<T, SlowError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SlowError::Invalid(msg.into()))
}
