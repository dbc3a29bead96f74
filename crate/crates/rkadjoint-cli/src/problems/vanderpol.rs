//! Van der Pol oscillator in first-order form with the damping strength as
//! the differentiable parameter:
//!
//! ```text
//! dx/dt = v
//! dv/dt = mu * ((1 - x^2) * v - x)
//! ```
//!
//! The shipped initial condition puts the state on the stable relaxation
//! branch so the solve starts without an initial transient. At large `mu`
//! the problem is stiff and an explicit method grinds through it with
//! stability-limited steps; that cost profile is part of what the benchmark
//! is meant to show.

use rkadjoint::forward::OdeProblem;
use rkadjoint::tape::{record, Tape};
use rkadjoint::Result;

/// Series expansion of the limit-cycle velocity at `x = 2`, good to
/// `O(mu^-3)`.
pub fn initial_velocity(mu: f64) -> f64 {
    -2.0 / 3.0 + 10.0 / (81.0 * mu) - 292.0 / (2187.0 * mu * mu)
}

pub fn rhs_tape() -> Result<Tape<f64>> {
    record(2, 1, |rec| {
        let x = rec.state(0);
        let v = rec.state(1);
        let mu = rec.param(0);
        let one = rec.constant(1.0);
        let dv = ((one - x * x) * v - x) * mu;
        Ok(vec![v, dv])
    })
}

/// Assembles the problem on `[0, tf]` at the given damping strength.
pub fn problem(mu: f64, tf: f64) -> Result<OdeProblem<f64>> {
    let tape = rhs_tape()?;
    OdeProblem::new(tape, vec![2.0, initial_velocity(mu)], vec![mu], 0.0, tf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rkadjoint::tape::{forward_eval, ReplayWorkspace};

    #[test]
    fn rhs_matches_the_plugged_in_formula() {
        let tape = rhs_tape().unwrap();
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        let f = forward_eval(&tape, &mut ws, &[2.0, 0.0], &[1.0], 0.0).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], -2.0);
        let f = forward_eval(&tape, &mut ws, &[0.5, 1.5], &[3.0], 0.0).unwrap();
        assert!((f[0] - 1.5).abs() < 1e-15);
        assert!((f[1] - 3.0 * ((1.0 - 0.25) * 1.5 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn initial_velocity_matches_the_series_by_hand() {
        let mu = 1e3;
        let expect = -2.0 / 3.0 + 10.0 / 81.0e3 - 292.0 / 2.187e9;
        assert!((initial_velocity(mu) - expect).abs() < 1e-15);
        assert!((initial_velocity(mu) - (-0.666543343392776)).abs() < 1e-10);
    }
}
