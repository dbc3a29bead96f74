//! Two-dimensional heat equation on the unit square, discretised with the
//! 5-point stencil on an `np x np` grid that includes the boundary.
//!
//! States are numbered `k = i + np*j` with `x_i = i*h`, `y_j = j*h`,
//! `h = 1/(np-1)`. Boundary rows have zero right-hand side, so homogeneous
//! Dirichlet data is baked into the ODE system. The single parameter is the
//! diffusivity.
//!
//! The shipped initial condition is the `sin(pi x) sin(pi y)` mode, which
//! decays as `exp(-2 pi^2 alpha t)` in the continuum. That closed form (and
//! its derivative with respect to the diffusivity) is the accuracy yardstick
//! for the solvers; the reported errors therefore mix spatial and temporal
//! discretisation error, which is the intended comparison.

use std::f64::consts::PI;

use rkadjoint::forward::OdeProblem;
use rkadjoint::tape::{record, Tape};
use rkadjoint::Result;

/// Grid and integration settings.
#[derive(Debug, Clone)]
pub struct HeatSpec {
    /// Grid points per side, boundary included.
    pub np: usize,
    /// Diffusivity (the one differentiable parameter).
    pub alpha: f64,
    pub tf: f64,
    /// Fixed step size.
    pub dt: f64,
}

impl HeatSpec {
    pub fn new(np: usize) -> Self {
        HeatSpec {
            np,
            alpha: 1.0,
            tf: 1e-2,
            dt: 5e-5,
        }
    }

    /// Explicit-Euler stability bound `h^2 / (4 alpha)`; steps above this
    /// blow up the forward solve.
    pub fn stability_limit(&self) -> f64 {
        let h = 1.0 / (self.np - 1) as f64;
        h * h / (4.0 * self.alpha)
    }
}

/// Records the stencil right-hand side. Boundary nodes emit a constant zero,
/// interior nodes `alpha * (east + west + north + south - 4*center) / h^2`.
pub fn rhs_tape(np: usize) -> Result<Tape<f64>> {
    assert!(np >= 3, "grid needs at least one interior point");
    let h = 1.0 / (np - 1) as f64;
    let inv_h2 = 1.0 / (h * h);
    record(np * np, 1, |rec| {
        let alpha = rec.param(0);
        let mut out = Vec::with_capacity(np * np);
        for j in 0..np {
            for i in 0..np {
                if i == 0 || j == 0 || i == np - 1 || j == np - 1 {
                    out.push(rec.constant(0.0));
                } else {
                    let center = rec.state(i + np * j);
                    let east = rec.state(i + 1 + np * j);
                    let west = rec.state(i - 1 + np * j);
                    let north = rec.state(i + np * (j + 1));
                    let south = rec.state(i + np * (j - 1));
                    let lap = (east + west + north + south - center * 4.0) * inv_h2;
                    out.push(alpha * lap);
                }
            }
        }
        Ok(out)
    })
}

/// `sin(pi x) sin(pi y)` sampled on the grid.
pub fn initial_state(np: usize) -> Vec<f64> {
    let h = 1.0 / (np - 1) as f64;
    let mut u = Vec::with_capacity(np * np);
    for j in 0..np {
        for i in 0..np {
            u.push((PI * i as f64 * h).sin() * (PI * j as f64 * h).sin());
        }
    }
    u
}

/// Continuum solution at `tf` for the single-mode initial condition.
pub fn exact_final(np: usize, alpha: f64, tf: f64) -> Vec<f64> {
    let decay = (-2.0 * PI * PI * alpha * tf).exp();
    initial_state(np).into_iter().map(|v| v * decay).collect()
}

/// Continuum sensitivity `d u(tf) / d alpha` for the single-mode initial
/// condition: `-2 pi^2 tf` times the solution itself.
pub fn exact_sensitivity(np: usize, alpha: f64, tf: f64) -> Vec<f64> {
    let factor = -2.0 * PI * PI * tf;
    exact_final(np, alpha, tf).into_iter().map(|v| v * factor).collect()
}

/// Assembles the initial value problem on `[0, tf]`.
pub fn problem(spec: &HeatSpec) -> Result<OdeProblem<f64>> {
    let tape = rhs_tape(spec.np)?;
    OdeProblem::new(tape, initial_state(spec.np), vec![spec.alpha], 0.0, spec.tf)
}
