//! Scalar abstraction over the floating-point type.
//!
//! Everything in this crate is generic over [`Real`] so the same solver and
//! tape code runs in `f32` or `f64`. The trait is a thin bundle of the
//! num-traits capabilities we actually use plus a convenience constructor for
//! coefficient literals.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by the integrator, tape, and adjoint code.
pub trait Real:
    Float + NumAssign + FromPrimitive + Sum + Debug + Display + LowerExp + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal (tableau coefficients, tolerances) into `Self`.
    ///
    /// Panics if the value is not representable, which cannot happen for the
    /// finite literals this crate feeds it.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 literal must convert")
    }

    /// Lossy view of `self` as `f64`, used for diagnostics and error reports.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + Sum
        + Debug
        + Display
        + LowerExp
        + Default
        + Send
        + Sync
        + 'static
{
}
