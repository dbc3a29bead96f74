//! Generalized Lotka-Volterra ensembles with randomly drawn interactions.
//!
//! Dynamics: `dx_i/dt = x_i (r_i + sum_j A_ij x_j)`. The differentiable
//! parameter vector packs the growth rates first and the interaction matrix
//! row-major after them: `alpha[i] = r_i`, `alpha[n + i*n + j] = A_ij`, so
//! `P = n + n^2`.
//!
//! Interaction matrices follow the classic random-community recipe: a fixed
//! negative diagonal for self-limitation, and each off-diagonal entry nonzero
//! with a given connectance, drawn from a zero-mean uniform distribution
//! whose scale shrinks as `1/sqrt(n)` to keep large communities stable.
//! Generation is deterministic in the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkadjoint::forward::OdeProblem;
use rkadjoint::tape::{record, Tape};
use rkadjoint::Result;

/// Ensemble settings. `Default` gives the benchmark community; the species
/// count and seed always come from the caller.
#[derive(Debug, Clone)]
pub struct GlvSpec {
    pub n: usize,
    pub seed: u64,
    /// Probability that an off-diagonal interaction is present.
    pub connectance: f64,
    /// Half-width of the uniform interaction distribution; `None` picks
    /// `0.1 / sqrt(n)`.
    pub sigma: Option<f64>,
    /// Self-interaction, must be negative for self-limitation.
    pub diagonal: f64,
    /// Common growth rate `r_i`.
    pub growth: f64,
    /// Common initial abundance.
    pub x0: f64,
    pub tf: f64,
}

impl GlvSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        GlvSpec {
            n,
            seed,
            connectance: 0.5,
            sigma: None,
            diagonal: -1.0,
            growth: 0.1,
            x0: 0.1,
            tf: 10.0,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(0.1 / (self.n as f64).sqrt())
    }
}

/// Records the right-hand side for `n` species; `2n^2 + n` tape operations.
pub fn rhs_tape(n: usize) -> Result<Tape<f64>> {
    record(n, n + n * n, |rec| {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = rec.param(i);
            for j in 0..n {
                acc = acc + rec.param(n + i * n + j) * rec.state(j);
            }
            out.push(rec.state(i) * acc);
        }
        Ok(out)
    })
}

/// Draws the packed parameter vector `[r | A]` for the spec's seed.
pub fn draw_parameters(spec: &GlvSpec) -> Vec<f64> {
    let n = spec.n;
    let sigma = spec.sigma();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut alpha = vec![0.0; n + n * n];
    for r in alpha.iter_mut().take(n) {
        *r = spec.growth;
    }
    for i in 0..n {
        for j in 0..n {
            let a = if i == j {
                spec.diagonal
            } else if rng.gen::<f64>() < spec.connectance {
                rng.gen_range(-sigma..sigma)
            } else {
                0.0
            };
            alpha[n + i * n + j] = a;
        }
    }
    alpha
}

/// Assembles the initial value problem on `[0, tf]`.
pub fn problem(spec: &GlvSpec) -> Result<OdeProblem<f64>> {
    let tape = rhs_tape(spec.n)?;
    let alpha = draw_parameters(spec);
    OdeProblem::new(tape, vec![spec.x0; spec.n], alpha, 0.0, spec.tf)
}
