use thiserror::Error;

/// Errors produced by the solver modules.
///
/// `GateFailure` is kept separate from plain errors: it signals that a
/// precondition of the theory (an exit condition, a smallness gate, an
/// admissibility bound) does not hold, which callers report with a distinct
/// exit status rather than as a crash.
#[derive(Debug, Error)]
pub enum Error {
    #[error("gate failure: {0}")]
    GateFailure(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("CFL violation: dt={dt} exceeds limit {limit} (max speed {speed})")]
    CflViolation { dt: f64, limit: f64, speed: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("weighted norm unbounded: {0}")]
    WeightedNormUnbounded(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),
}

impl Error {
    /// True when the error is a theory-gate failure rather than a malfunction.
    pub fn is_gate_failure(&self) -> bool {
        matches!(self, Error::GateFailure(_))
    }
}
