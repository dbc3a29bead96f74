//! Error type shared by the tape, integrator, and adjoint layers.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while recording, integrating, or sweeping.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation was requested during tape recording that the record/replay
    /// model cannot express (for example, control flow on a runtime value).
    Recording(String),
    /// A buffer or vector had the wrong length for the requested operation.
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// `reverse_vjp` was called before `forward_eval` primed the workspace
    /// with values at the linearisation point.
    WorkspaceNotPrimed,
    /// The state or the embedded error estimate became non-finite at time `t`.
    Divergence { t: f64 },
    /// The step controller rejected more consecutive attempts at one step than
    /// `max_rejects` allows. `error_ratio` is the last scaled error norm.
    StepFailure {
        t: f64,
        error_ratio: f64,
        rejects: usize,
    },
    /// An adjoint buffer became non-finite during the reverse pass. The index
    /// counts reverse steps from the final time.
    AdjointDivergence { step: usize },
    /// The backward state re-solve in the continuous-adjoint path drifted too
    /// far from the stored initial state for its output to be trusted.
    /// `rel_error` is the relative inf-norm of the reconstruction defect.
    BackwardUnstable { rel_error: f64 },
    /// A Butcher tableau failed validation or an unknown tableau name was
    /// requested.
    Tableau(String),
    /// A solver or objective was configured inconsistently.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Recording(what) => write!(f, "tape recording failed: {what}"),
            Error::Dimension {
                what,
                expected,
                got,
            } => write!(f, "dimension mismatch for {what}: expected {expected}, got {got}"),
            Error::WorkspaceNotPrimed => {
                write!(f, "reverse sweep requested before forward_eval primed the workspace")
            }
            Error::Divergence { t } => write!(f, "state became non-finite at t = {t:e}"),
            Error::StepFailure {
                t,
                error_ratio,
                rejects,
            } => write!(
                f,
                "step controller gave up at t = {t:e} after {rejects} rejections (scaled error {error_ratio:e})"
            ),
            Error::AdjointDivergence { step } => {
                write!(f, "adjoint state became non-finite at reverse step {step}")
            }
            Error::BackwardUnstable { rel_error } => write!(
                f,
                "backward state re-solve missed the initial state by {rel_error:e} relative; result untrusted"
            ),
            Error::Tableau(what) => write!(f, "invalid tableau: {what}"),
            Error::Config(what) => write!(f, "invalid configuration: {what}"),
        }
    }
}

impl std::error::Error for Error {}
