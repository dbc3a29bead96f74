//! Independent sensitivity methods used to cross-check the reverse pass.
//!
//! Three references with different failure modes:
//!
//! - [`cfsa_solve`]: forward (tangent) sensitivities. The state is augmented
//!   with the sensitivity matrices and the same integrator advances the
//!   augmented system. Cost grows with the number of inputs, accuracy tracks
//!   the forward solve.
//! - [`casa_naive_solve`]: continuous adjoint, integrated backwards by
//!   re-solving the state equation in reversed time alongside the adjoint
//!   rows. No forward trajectory is stored, which is exactly why it falls
//!   apart on diffusive problems: the reversed state equation is unstable and
//!   the Jacobians get evaluated on a garbage trajectory.
//! - [`nd_sensitivity`]: forward differences of the whole solve. Slow and
//!   bump-limited, but independent of every line of the adjoint code.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use crate::adjoint::{
    accumulate_quadrature, Objective, ObjectiveArgs, SensitivityResult, SolveStats,
};
use crate::error::{Error, Result};
use crate::forward::{integrate, integrate_rhs, OdeProblem, OdeRhs, Stepping, Trajectory};
use crate::real::Real;
use crate::tableau::ButcherTableau;
use crate::tape::{
    forward_eval_into, jacobian_dense, reverse_vjp_into, LaneBatch, ReplayWorkspace, Tape,
    MAX_LANES,
};

/// Forward solve plus objective evaluation, including the quadrature part for
/// trajectory costs. This is the map that numerical differencing perturbs.
pub fn evaluate_objective<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
    objective: &Objective<T>,
) -> Result<(Vec<T>, Trajectory<T>)> {
    let (u_final, trajectory) = integrate(problem, tableau, stepping)?;
    let args = ObjectiveArgs {
        u0: &problem.u0,
        u_final: &u_final,
        alpha: &problem.alpha,
    };
    let mut psi = objective.value_of(&args)?;
    if let Some(rt) = objective.r_tape() {
        let q = accumulate_quadrature(problem, tableau, &trajectory, rt)?;
        for (pv, qv) in psi.iter_mut().zip(q) {
            *pv = *pv + qv;
        }
    }
    Ok((psi, trajectory))
}

// ---------------------------------------------------------------------------
// Numerical differencing
// ---------------------------------------------------------------------------

/// Forward-difference settings.
#[derive(Debug, Clone)]
pub struct NdOptions<T> {
    /// Absolute bump added to one input per solve.
    pub bump: T,
    /// Also difference the initial state (adds `N` solves).
    pub bump_initial: bool,
}

impl<T: Real> Default for NdOptions<T> {
    fn default() -> Self {
        NdOptions {
            bump: T::of(1e-6),
            bump_initial: false,
        }
    }
}

/// One forward-difference column with respect to parameter `index`, given the
/// unperturbed objective values. Columns are independent, so callers can farm
/// them out across threads.
pub fn nd_alpha_column<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
    objective: &Objective<T>,
    index: usize,
    bump: T,
    base_psi: &[T],
) -> Result<Vec<T>> {
    let mut bumped = problem.clone();
    bumped.alpha[index] += bump;
    let (psi, _) = evaluate_objective(&bumped, tableau, stepping, objective)?;
    Ok(psi
        .iter()
        .zip(base_psi)
        .map(|(&a, &b)| (a - b) / bump)
        .collect())
}

/// One forward-difference column with respect to initial-state entry `index`.
pub fn nd_u0_column<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
    objective: &Objective<T>,
    index: usize,
    bump: T,
    base_psi: &[T],
) -> Result<Vec<T>> {
    let mut bumped = problem.clone();
    bumped.u0[index] += bump;
    let (psi, _) = evaluate_objective(&bumped, tableau, stepping, objective)?;
    Ok(psi
        .iter()
        .zip(base_psi)
        .map(|(&a, &b)| (a - b) / bump)
        .collect())
}

/// Sensitivities by forward differences: one extra solve per differenced
/// input. Initial-state columns are skipped unless requested.
pub fn nd_sensitivity<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
    objective: &Objective<T>,
    options: &NdOptions<T>,
) -> Result<SensitivityResult<T>> {
    if !(options.bump > T::zero()) || !options.bump.is_finite() {
        return Err(Error::Config(format!(
            "difference bump must be positive and finite, got {}",
            options.bump
        )));
    }
    let started = Instant::now();
    let m = objective.m();
    let n = problem.dim();
    let p = problem.n_param();

    let (psi, trajectory) = evaluate_objective(problem, tableau, stepping, objective)?;

    let mut d_alpha = Array2::zeros((m, p));
    for k in 0..p {
        let col = nd_alpha_column(problem, tableau, stepping, objective, k, options.bump, &psi)?;
        for i in 0..m {
            d_alpha[(i, k)] = col[i];
        }
    }

    let mut d_u0 = Array2::zeros((m, n));
    if options.bump_initial {
        for j in 0..n {
            let col = nd_u0_column(problem, tableau, stepping, objective, j, options.bump, &psi)?;
            for i in 0..m {
                d_u0[(i, j)] = col[i];
            }
        }
    }

    Ok(SensitivityResult {
        psi,
        d_u0,
        d_alpha,
        stats: SolveStats {
            accepted: trajectory.len(),
            rejected: trajectory.rejected(),
            forward_seconds: started.elapsed().as_secs_f64(),
            reverse_seconds: 0.0,
        },
    })
}

// ---------------------------------------------------------------------------
// Forward (tangent) sensitivities
// ---------------------------------------------------------------------------

/// Output of the tangent method.
#[derive(Debug, Clone)]
pub struct CfsaResult<T> {
    pub u_final: Vec<T>,
    /// `N x N` matrix `du(tf)/du0`, when requested.
    pub d_u0: Option<Array2<T>>,
    /// `N x P` matrix `du(tf)/dalpha`.
    pub d_alpha: Array2<T>,
    pub stats: SolveStats,
}

/// Augmented right-hand side `[u, (gamma), beta]` where `gamma' = J_u gamma`
/// and `beta' = J_u beta + J_alpha`, with the Jacobians assembled fresh at
/// every evaluation point.
struct TangentRhs<'a, T: Real> {
    tape: &'a Tape<T>,
    ws: ReplayWorkspace<T>,
    alpha: &'a [T],
    n: usize,
    p: usize,
    with_initial: bool,
}

impl<'a, T: Real> OdeRhs<T> for TangentRhs<'a, T> {
    fn dim(&self) -> usize {
        let gamma = if self.with_initial { self.n * self.n } else { 0 };
        self.n + gamma + self.n * self.p
    }

    fn eval(&mut self, y: &[T], t: T, out: &mut [T]) -> Result<()> {
        let (n, p) = (self.n, self.p);
        let u = &y[..n];
        forward_eval_into(self.tape, &mut self.ws, u, self.alpha, t, &mut out[..n])?;
        let (jx, ja) = jacobian_dense(self.tape, &mut self.ws, u, self.alpha, t)?;

        let mut off = n;
        if self.with_initial {
            let gamma = ArrayView2::from_shape((n, n), &y[off..off + n * n])
                .map_err(|_| Error::Config("tangent state layout".into()))?;
            let dg = jx.dot(&gamma);
            for i in 0..n {
                for j in 0..n {
                    out[off + i * n + j] = dg[(i, j)];
                }
            }
            off += n * n;
        }
        let beta = ArrayView2::from_shape((n, p), &y[off..off + n * p])
            .map_err(|_| Error::Config("tangent state layout".into()))?;
        let db = jx.dot(&beta);
        for i in 0..n {
            for k in 0..p {
                out[off + i * p + k] = db[(i, k)] + ja[(i, k)];
            }
        }
        Ok(())
    }
}

/// Tangent sensitivities of the final state: integrates the state together
/// with `du/dalpha` (and optionally `du/du0`) through the same stepper. The
/// step controller sees the augmented state, so the discretisation generally
/// differs from a plain forward solve of the same problem.
pub fn cfsa_solve<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
    with_initial: bool,
) -> Result<CfsaResult<T>> {
    let started = Instant::now();
    let n = problem.dim();
    let p = problem.n_param();
    let mut rhs = TangentRhs {
        tape: &problem.tape,
        ws: ReplayWorkspace::new(&problem.tape, MAX_LANES)?,
        alpha: &problem.alpha,
        n,
        p,
        with_initial,
    };

    let mut y0 = vec![T::zero(); rhs.dim()];
    y0[..n].copy_from_slice(&problem.u0);
    if with_initial {
        for i in 0..n {
            y0[n + i * n + i] = T::one();
        }
    }

    let (y_final, trajectory) =
        integrate_rhs(&mut rhs, &y0, problem.t0, problem.tf, tableau, stepping)?;

    let mut off = n;
    let d_u0 = if with_initial {
        let g = Array2::from_shape_vec((n, n), y_final[off..off + n * n].to_vec())
            .map_err(|_| Error::Config("tangent state layout".into()))?;
        off += n * n;
        Some(g)
    } else {
        None
    };
    let d_alpha = Array2::from_shape_vec((n, p), y_final[off..off + n * p].to_vec())
        .map_err(|_| Error::Config("tangent state layout".into()))?;

    Ok(CfsaResult {
        u_final: y_final[..n].to_vec(),
        d_u0,
        d_alpha,
        stats: SolveStats {
            accepted: trajectory.len(),
            rejected: trajectory.rejected(),
            forward_seconds: started.elapsed().as_secs_f64(),
            reverse_seconds: 0.0,
        },
    })
}

// ---------------------------------------------------------------------------
// Continuous adjoint, naive backward solve
// ---------------------------------------------------------------------------

/// Augmented right-hand side in reversed time `tau`, with `t = t0 + tf - tau`:
/// the state runs backwards (`dU/dtau = -F`), the adjoint rows and the
/// parameter quadrature run forwards in `tau`. The adjoint derivatives come
/// from batched reverse sweeps, so no Jacobian is ever formed.
struct ReversedAdjointRhs<'a, T: Real> {
    tape: &'a Tape<T>,
    ws: ReplayWorkspace<T>,
    alpha: &'a [T],
    n: usize,
    m: usize,
    /// `t0 + tf`, so `t = t_sum - tau`.
    t_sum: T,
    seeds: LaneBatch<T>,
    x_buf: Vec<T>,
    a_buf: Vec<T>,
}

impl<'a, T: Real> OdeRhs<T> for ReversedAdjointRhs<'a, T> {
    fn dim(&self) -> usize {
        let p = self.tape.n_param();
        self.n + self.m * self.n + self.m * p
    }

    fn eval(&mut self, y: &[T], tau: T, out: &mut [T]) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let p = self.tape.n_param();
        let w = self.ws.lanes();
        let t = self.t_sum - tau;
        let u = &y[..n];

        forward_eval_into(self.tape, &mut self.ws, u, self.alpha, t, &mut out[..n])?;
        for v in &mut out[..n] {
            *v = -*v;
        }

        // Row i of the adjoint block evolves as lambda_i J_u and feeds the
        // quadrature rows lambda_i J_alpha; one sweep yields both.
        let mut row = 0;
        while row < m {
            let lanes_here = w.min(m - row);
            self.seeds.zero();
            for l in 0..lanes_here {
                let i = row + l;
                self.seeds.set_lane(l, &y[n + i * n..n + (i + 1) * n])?;
            }
            reverse_vjp_into(self.tape, &mut self.ws, &self.seeds, &mut self.x_buf, &mut self.a_buf)?;
            for l in 0..lanes_here {
                let i = row + l;
                out[n + i * n..n + (i + 1) * n].copy_from_slice(&self.x_buf[l * n..(l + 1) * n]);
                out[n + m * n + i * p..n + m * n + (i + 1) * p]
                    .copy_from_slice(&self.a_buf[l * p..(l + 1) * p]);
            }
            row += lanes_here;
        }
        Ok(())
    }
}

/// Continuous adjoint without trajectory storage: after the forward solve,
/// the state equation is re-integrated backwards together with the adjoint
/// rows, and the Jacobians are evaluated on that backward state. Endpoint
/// objectives only.
///
/// On diffusive problems the backward state equation amplifies roundoff
/// exponentially. The solve checks its own premise: the backward state must
/// land back on the stored initial state, and a relative inf-norm defect
/// above 100% returns [`Error::BackwardUnstable`] instead of a result whose
/// internal Jacobians were evaluated on garbage. That failure mode is the
/// point of having this reference.
pub fn casa_naive_solve<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
    objective: &Objective<T>,
) -> Result<SensitivityResult<T>> {
    if objective.r_tape().is_some() {
        return Err(Error::Config(
            "the backward-resolve adjoint handles endpoint objectives only".into(),
        ));
    }
    let n = problem.dim();
    let p = problem.n_param();
    let m = objective.m();

    let started = Instant::now();
    let (u_final, fwd) = integrate(problem, tableau, stepping)?;
    let forward_seconds = started.elapsed().as_secs_f64();

    let args = ObjectiveArgs {
        u0: &problem.u0,
        u_final: &u_final,
        alpha: &problem.alpha,
    };
    let psi = objective.value_of(&args)?;
    let seed = objective.d_final_of(&args, n)?;

    let lanes = MAX_LANES;
    let mut rhs = ReversedAdjointRhs {
        tape: &problem.tape,
        ws: ReplayWorkspace::new(&problem.tape, lanes)?,
        alpha: &problem.alpha,
        n,
        m,
        t_sum: problem.t0 + problem.tf,
        seeds: LaneBatch::new(lanes, n)?,
        x_buf: vec![T::zero(); lanes * n],
        a_buf: vec![T::zero(); lanes * p],
    };
    let mut y0 = vec![T::zero(); rhs.dim()];
    y0[..n].copy_from_slice(&u_final);
    for i in 0..m {
        for j in 0..n {
            y0[n + i * n + j] = seed[(i, j)];
        }
    }

    let reverse_started = Instant::now();
    let span = problem.tf - problem.t0;
    let (y_end, bwd) = integrate_rhs(&mut rhs, &y0, T::zero(), span, tableau, stepping)?;

    // The first n entries of y_end are the backward re-solve of the state;
    // they should reproduce u0. When they do not, everything the adjoint and
    // quadrature rows saw along the way was evaluated at the wrong states.
    let mut defect = T::zero();
    let mut scale = T::zero();
    for (back, init) in y_end[..n].iter().zip(problem.u0.iter()) {
        defect = defect.max((*back - *init).abs());
        scale = scale.max(init.abs());
    }
    let rel_error = defect / scale.max(T::one());
    if !(rel_error <= T::one()) {
        return Err(Error::BackwardUnstable {
            rel_error: rel_error.to_f64().unwrap_or(f64::NAN),
        });
    }

    let mut d_u0 = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            d_u0[(i, j)] = y_end[n + i * n + j];
        }
    }
    if let Some(d_init) = objective.d_initial_of(&args, n)? {
        d_u0 = d_u0 + &d_init;
    }
    let mut d_alpha = match objective.d_alpha_of(&args, p)? {
        Some(d) => d,
        None => Array2::zeros((m, p)),
    };
    for i in 0..m {
        for k in 0..p {
            d_alpha[(i, k)] += y_end[n + m * n + i * p + k];
        }
    }

    Ok(SensitivityResult {
        psi,
        d_u0,
        d_alpha,
        stats: SolveStats {
            accepted: fwd.len() + bwd.len(),
            rejected: fwd.rejected() + bwd.rejected(),
            forward_seconds,
            reverse_seconds: reverse_started.elapsed().as_secs_f64(),
        },
    })
}
