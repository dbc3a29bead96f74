//! Discrete adjoint sensitivity analysis for adaptive explicit Runge-Kutta
//! solvers.
//!
//! The crate integrates ODE systems `du/dt = F(u, alpha, t)` with embedded
//! error control, records the right-hand side once into a replayable
//! instruction tape, and then differentiates the *discrete* solver map
//! exactly: the reverse pass walks the accepted steps backwards, recomputes
//! the stage states bitwise identically from lightweight checkpoints, and
//! propagates adjoints through lane-batched vector-Jacobian products. The
//! result is the gradient of the numerical solution itself, accurate to
//! round-off rather than to the integration tolerance.
//!
//! Modules:
//! - [`tableau`]: Butcher tableaus (Euler, classic RK4, Cash-Karp 5(4),
//!   Dormand-Prince 5(4)).
//! - [`tape`]: record/replay reverse-mode tape with lane-batched sweeps.
//! - [`forward`]: adaptive and fixed-step integration with checkpointing.
//! - [`adjoint`]: the reverse pass for endpoint and trajectory objectives.
//! - [`reference`]: slower oracles (numerical differentiation, continuous
//!   forward sensitivities, a naive continuous adjoint) used for validation
//!   and benchmarking.
//!
//! Everything is generic over the scalar type through [`Real`]; the `*64`
//! aliases below fix `f64` for the common case.

pub mod adjoint;
pub mod error;
pub mod forward;
pub mod real;
pub mod reference;
pub mod tableau;
pub mod tape;

pub use error::{Error, Result};
pub use real::Real;

// Matrices in the public API are ndarray types; re-exported so downstream
// crates always match the version this crate was built with.
pub use ndarray;

/// Double-precision tableau.
pub type Tableau64 = tableau::ButcherTableau<f64>;
/// Double-precision tape.
pub type Tape64 = tape::Tape<f64>;
/// Double-precision replay workspace.
pub type Workspace64 = tape::ReplayWorkspace<f64>;
/// Double-precision problem definition.
pub type Problem64 = forward::OdeProblem<f64>;
/// Double-precision step controller.
pub type Controller64 = forward::StepController<f64>;
/// Double-precision trajectory record.
pub type Trajectory64 = forward::Trajectory<f64>;
/// Double-precision objective.
pub type Objective64 = adjoint::Objective<f64>;
/// Double-precision sensitivity result.
pub type Sensitivity64 = adjoint::SensitivityResult<f64>;
