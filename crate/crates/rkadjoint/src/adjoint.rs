//! Reverse pass: exact gradients of the discrete solver map.
//!
//! For an objective with endpoint part `E(u(tf), u(t0), alpha)` and optional
//! running part `integral R(u, alpha, t) dt`, the reverse pass walks the
//! accepted steps backwards. At step `n` it recomputes the stage states from
//! the checkpoint `(t^n, dt^n, u^n)` bitwise identically to the forward pass,
//! then propagates the adjoint matrix `w` (one row per objective component)
//! from the step's end node back to its start node:
//!
//! - the end node scatters into every stage `q` with weight `dt^n b_q` and
//!   into the start node with weight one;
//! - each stage `m`, visited from `s` down to `1`, contributes one batched
//!   vector-Jacobian product of its adjoint rows at the stage state, scattered
//!   to earlier stages `q` with weight `dt^n a_mq` and to the start node with
//!   weight one, while the parameter adjoint accumulates the `dF/dalpha` part
//!   of the same sweep.
//!
//! Objective rows are processed in lane batches; each lane's arithmetic never
//! depends on its batch companions, so results are invariant to the lane
//! width. The accumulation order over steps and stages is fixed (both
//! descending), which makes runs reproducible bit for bit.

use std::time::Instant;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::forward::{
    eval_stages, integrate, Checkpoint, OdeProblem, StepController, Stepping, TapeRhs, Trajectory,
};
use crate::real::Real;
use crate::tableau::ButcherTableau;
use crate::tape::{forward_eval_into, reverse_vjp_into, LaneBatch, ReplayWorkspace, Tape};

/// Borrowed evaluation context for objective callbacks.
pub struct ObjectiveArgs<'a, T> {
    pub u0: &'a [T],
    pub u_final: &'a [T],
    pub alpha: &'a [T],
}

type ValueFn<T> = Box<dyn Fn(&ObjectiveArgs<'_, T>) -> Vec<T> + Send + Sync>;
type PartialFn<T> = Box<dyn Fn(&ObjectiveArgs<'_, T>) -> Array2<T> + Send + Sync>;

/// An `M`-component objective `psi_i = E_i + integral R_i dt`.
///
/// The endpoint part is supplied through callbacks for its value and partial
/// derivatives; partials that are identically zero can be omitted. The running
/// part, when present, is a recorded tape with `M` outputs over the same
/// inputs as the right-hand side.
pub struct Objective<T> {
    m: usize,
    value: ValueFn<T>,
    d_final: PartialFn<T>,
    d_initial: Option<PartialFn<T>>,
    d_alpha: Option<PartialFn<T>>,
    r_tape: Option<Tape<T>>,
}

impl<T: Real> Objective<T> {
    /// Objective with endpoint value `E` and its derivative with respect to
    /// the final state (an `M x N` matrix).
    pub fn new(m: usize, value: ValueFn<T>, d_final: PartialFn<T>) -> Self {
        Objective {
            m,
            value,
            d_final,
            d_initial: None,
            d_alpha: None,
            r_tape: None,
        }
    }

    /// The identity objective `psi_i = u_i(tf)`: one component per state, unit
    /// seed matrix.
    pub fn final_state(n: usize) -> Self {
        Objective::new(
            n,
            Box::new(|args| args.u_final.to_vec()),
            Box::new(move |_| Array2::eye(n)),
        )
    }

    /// Adds the derivative of `E` with respect to the initial state
    /// (an `M x N` matrix).
    pub fn with_initial_partial(mut self, f: PartialFn<T>) -> Self {
        self.d_initial = Some(f);
        self
    }

    /// Adds the derivative of `E` with respect to the parameters
    /// (an `M x P` matrix).
    pub fn with_alpha_partial(mut self, f: PartialFn<T>) -> Self {
        self.d_alpha = Some(f);
        self
    }

    /// Adds a running cost integrand recorded as a tape with `M` outputs.
    pub fn with_trajectory_cost(mut self, r_tape: Tape<T>) -> Result<Self> {
        if r_tape.n_out() != self.m {
            return Err(Error::Dimension {
                what: "trajectory cost outputs",
                expected: self.m,
                got: r_tape.n_out(),
            });
        }
        self.r_tape = Some(r_tape);
        Ok(self)
    }

    /// Pure running cost: `E = 0`, `psi_i = integral R_i dt`.
    pub fn trajectory_only(m: usize, r_tape: Tape<T>) -> Result<Self> {
        Objective::new(
            m,
            Box::new(move |_| vec![T::zero(); m]),
            Box::new(move |args| Array2::zeros((m, args.u_final.len()))),
        )
        .with_trajectory_cost(r_tape)
    }

    /// Component count `M`.
    pub fn m(&self) -> usize {
        self.m
    }

    /// The running-cost tape, when one is attached.
    pub fn r_tape(&self) -> Option<&Tape<T>> {
        self.r_tape.as_ref()
    }

    fn check_shape(&self, what: &'static str, got: &Array2<T>, rows: usize, cols: usize) -> Result<()> {
        if got.nrows() != rows || got.ncols() != cols {
            return Err(Error::Dimension {
                what,
                expected: rows * cols,
                got: got.nrows() * got.ncols(),
            });
        }
        Ok(())
    }

    pub(crate) fn value_of(&self, args: &ObjectiveArgs<'_, T>) -> Result<Vec<T>> {
        let v = (self.value)(args);
        if v.len() != self.m {
            return Err(Error::Dimension {
                what: "objective value",
                expected: self.m,
                got: v.len(),
            });
        }
        Ok(v)
    }

    pub(crate) fn d_final_of(&self, args: &ObjectiveArgs<'_, T>, n: usize) -> Result<Array2<T>> {
        let d = (self.d_final)(args);
        self.check_shape("objective final-state partial", &d, self.m, n)?;
        Ok(d)
    }

    pub(crate) fn d_initial_of(&self, args: &ObjectiveArgs<'_, T>, n: usize) -> Result<Option<Array2<T>>> {
        match &self.d_initial {
            None => Ok(None),
            Some(f) => {
                let d = f(args);
                self.check_shape("objective initial-state partial", &d, self.m, n)?;
                Ok(Some(d))
            }
        }
    }

    pub(crate) fn d_alpha_of(&self, args: &ObjectiveArgs<'_, T>, p: usize) -> Result<Option<Array2<T>>> {
        match &self.d_alpha {
            None => Ok(None),
            Some(f) => {
                let d = f(args);
                self.check_shape("objective parameter partial", &d, self.m, p)?;
                Ok(Some(d))
            }
        }
    }
}

/// Adjoint carried between reverse steps: the state adjoint rows at the node
/// between two steps, the parameter adjoint accumulator, and (for trajectory
/// costs) the per-row quadrature adjoints.
#[derive(Debug, Clone)]
pub struct AdjointState<T> {
    m: usize,
    n: usize,
    p: usize,
    /// `M x N`, row-major: adjoint of the objective rows with respect to the
    /// state at the current node.
    w: Vec<T>,
    /// `M x P`, row-major.
    alpha_bar: Vec<T>,
    /// `M` quadrature adjoints; all ones at the final node. Empty when the
    /// objective has no running cost.
    v: Vec<T>,
}

impl<T: Real> AdjointState<T> {
    /// Seeds the reverse pass: `w` starts as `dE/du(tf)` and the parameter
    /// accumulator as `dE/dalpha` (or zero).
    pub fn new(seed_w: &Array2<T>, seed_alpha: Option<&Array2<T>>, p: usize) -> Self {
        let (m, n) = (seed_w.nrows(), seed_w.ncols());
        let w = seed_w.iter().copied().collect();
        let alpha_bar = match seed_alpha {
            Some(a) => a.iter().copied().collect(),
            None => vec![T::zero(); m * p],
        };
        AdjointState {
            m,
            n,
            p,
            w,
            alpha_bar,
            v: Vec::new(),
        }
    }

    /// Enables the running-cost coupling with unit quadrature adjoints.
    pub fn with_trajectory_cost(mut self) -> Self {
        self.v = vec![T::one(); self.m];
        self
    }

    /// State adjoint rows, `M x N` row-major.
    pub fn w(&self) -> &[T] {
        &self.w
    }

    /// Parameter adjoint rows, `M x P` row-major.
    pub fn alpha_bar(&self) -> &[T] {
        &self.alpha_bar
    }

    fn is_finite(&self) -> bool {
        self.w.iter().all(|x| x.is_finite())
    }
}

/// Timing and step-count diagnostics of one solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub forward_seconds: f64,
    pub reverse_seconds: f64,
}

/// Gradients of the discrete solution map.
#[derive(Debug, Clone)]
pub struct SensitivityResult<T> {
    /// Objective values `psi_i` at the final time.
    pub psi: Vec<T>,
    /// `M x N` matrix `dpsi/du0`.
    pub d_u0: Array2<T>,
    /// `M x P` matrix `dpsi/dalpha`.
    pub d_alpha: Array2<T>,
    pub stats: SolveStats,
}

/// Knobs for the reverse pass.
#[derive(Debug, Clone)]
pub struct AdjointOptions {
    /// Lane width for batched sweeps, 1 to 8.
    pub lanes: usize,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        AdjointOptions { lanes: 4 }
    }
}

/// Recomputes the stage states and stage derivatives of one accepted step.
///
/// Returns `(stage_states, stage_derivs)`, each with one row per stage. The
/// rows are bitwise identical to what the forward pass computed from the same
/// checkpoint, because both run the same accumulation in the same order.
pub fn recompute_stages<T: Real>(
    tableau: &ButcherTableau<T>,
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    u: &[T],
    alpha: &[T],
    t: T,
    dt: T,
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let n = u.len();
    let s = tableau.stages();
    let mut k = vec![T::zero(); s * n];
    let mut u_stage = vec![T::zero(); s * n];
    {
        let mut rhs = TapeRhs::new(tape, ws, alpha)?;
        eval_stages(tableau, &mut rhs, u, t, dt, &mut k, &mut u_stage)?;
    }
    if !k.iter().all(|x| x.is_finite()) {
        return Err(Error::Divergence { t: t.as_f64() });
    }
    let states = (0..s).map(|m| u_stage[m * n..(m + 1) * n].to_vec()).collect();
    let derivs = (0..s).map(|m| k[m * n..(m + 1) * n].to_vec()).collect();
    Ok((states, derivs))
}

/// Reusable buffers for the reverse sweep.
struct SweepScratch<T> {
    /// Stage adjoint matrices `w^{m,n}` for `m = 1..=s`, each `M x N`.
    w_stage: Vec<Vec<T>>,
    /// Start-node adjoint `w^{0,n}`, `M x N`.
    w_node0: Vec<T>,
    k: Vec<T>,
    u_stage: Vec<T>,
    rhs_out: Vec<T>,
    seeds: LaneBatch<T>,
    x_buf: Vec<T>,
    a_buf: Vec<T>,
    r: Option<RScratch<T>>,
}

struct RScratch<T> {
    ws: ReplayWorkspace<T>,
    out: Vec<T>,
    seeds: LaneBatch<T>,
    x_buf: Vec<T>,
    a_buf: Vec<T>,
    unit: Vec<T>,
}

impl<T: Real> SweepScratch<T> {
    fn new(
        tableau: &ButcherTableau<T>,
        tape: &Tape<T>,
        r_tape: Option<&Tape<T>>,
        m: usize,
        lanes: usize,
    ) -> Result<Self> {
        let n = tape.n_state();
        let p = tape.n_param();
        let s = tableau.stages();
        let r = match r_tape {
            None => None,
            Some(rt) => Some(RScratch {
                ws: ReplayWorkspace::new(rt, lanes)?,
                out: vec![T::zero(); rt.n_out()],
                seeds: LaneBatch::new(lanes, rt.n_out())?,
                x_buf: vec![T::zero(); lanes * n],
                a_buf: vec![T::zero(); lanes * p],
                unit: vec![T::zero(); rt.n_out()],
            }),
        };
        Ok(SweepScratch {
            w_stage: (0..s).map(|_| vec![T::zero(); m * n]).collect(),
            w_node0: vec![T::zero(); m * n],
            k: vec![T::zero(); s * n],
            u_stage: vec![T::zero(); s * n],
            rhs_out: vec![T::zero(); n],
            seeds: LaneBatch::new(lanes, n)?,
            x_buf: vec![T::zero(); lanes * n],
            a_buf: vec![T::zero(); lanes * p],
            r,
        })
    }
}

/// One reverse step: pulls the adjoint state from the node after `checkpoint`
/// to the node before it.
fn reverse_step<T: Real>(
    tableau: &ButcherTableau<T>,
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    checkpoint: &Checkpoint<T>,
    alpha: &[T],
    state: &mut AdjointState<T>,
    scratch: &mut SweepScratch<T>,
    r_tape: Option<&Tape<T>>,
) -> Result<()> {
    let n = state.n;
    let p = state.p;
    let m_rows = state.m;
    let w = ws.lanes();
    let s = tableau.stages();
    let dt = checkpoint.dt;
    let t = checkpoint.t;
    let b = tableau.b();
    let a = tableau.a();
    let c = tableau.c();

    // Recompute the stages exactly as the forward pass did.
    {
        let mut rhs = TapeRhs::new(tape, ws, alpha)?;
        eval_stages(
            tableau,
            &mut rhs,
            &checkpoint.state,
            t,
            dt,
            &mut scratch.k,
            &mut scratch.u_stage,
        )?;
    }
    if !scratch.k.iter().all(|x| x.is_finite()) {
        return Err(Error::Divergence { t: t.as_f64() });
    }

    // Scatter the end-node adjoint: weight dt*b_q into stage q, weight one
    // into the start node.
    for q in 0..s {
        let coef = dt * b[q];
        let dst = &mut scratch.w_stage[q];
        for (d, &src) in dst.iter_mut().zip(&state.w) {
            *d = coef * src;
        }
    }
    scratch.w_node0.copy_from_slice(&state.w);

    // Stages from s down to 1 (index m0 = m - 1). Each stage fires one
    // batched sweep of the right-hand side tape (plus one of the running-cost
    // tape when present) and scatters the combined state contribution.
    for m0 in (0..s).rev() {
        let t_m = t + c[m0] * dt;
        let u_m = &scratch.u_stage[m0 * n..(m0 + 1) * n];
        forward_eval_into(tape, ws, u_m, alpha, t_m, &mut scratch.rhs_out)?;
        if let (Some(r), Some(rt)) = (scratch.r.as_mut(), r_tape) {
            forward_eval_into(rt, &mut r.ws, u_m, alpha, t_m, &mut r.out)?;
        }

        let (earlier, current) = scratch.w_stage.split_at_mut(m0);
        let w_m = &current[0];

        let mut row = 0;
        while row < m_rows {
            let lanes_here = w.min(m_rows - row);
            scratch.seeds.zero();
            for l in 0..lanes_here {
                scratch
                    .seeds
                    .set_lane(l, &w_m[(row + l) * n..(row + l + 1) * n])?;
            }
            reverse_vjp_into(tape, ws, &scratch.seeds, &mut scratch.x_buf, &mut scratch.a_buf)?;

            if let (Some(r), Some(rt)) = (scratch.r.as_mut(), r_tape) {
                r.seeds.zero();
                for l in 0..lanes_here {
                    let i = row + l;
                    r.unit[i] = dt * b[m0] * state.v[i];
                    r.seeds.set_lane(l, &r.unit)?;
                    r.unit[i] = T::zero();
                }
                reverse_vjp_into(rt, &mut r.ws, &r.seeds, &mut r.x_buf, &mut r.a_buf)?;
                // Combine before scattering so each target sees one rounded
                // contribution per stage.
                for l in 0..lanes_here {
                    for j in 0..n {
                        scratch.x_buf[l * n + j] += r.x_buf[l * n + j];
                    }
                    for kidx in 0..p {
                        scratch.a_buf[l * p + kidx] += r.a_buf[l * p + kidx];
                    }
                }
            }

            for l in 0..lanes_here {
                let i = row + l;
                let contrib = &scratch.x_buf[l * n..(l + 1) * n];
                for q0 in 0..m0 {
                    let coef = dt * a[m0][q0];
                    let dst = &mut earlier[q0][i * n..(i + 1) * n];
                    for (d, &cv) in dst.iter_mut().zip(contrib) {
                        *d += coef * cv;
                    }
                }
                let dst = &mut scratch.w_node0[i * n..(i + 1) * n];
                for (d, &cv) in dst.iter_mut().zip(contrib) {
                    *d += cv;
                }
                let pa = &mut state.alpha_bar[i * p..(i + 1) * p];
                for (d, &cv) in pa.iter_mut().zip(&scratch.a_buf[l * p..(l + 1) * p]) {
                    *d += cv;
                }
            }
            row += lanes_here;
        }
    }

    state.w.copy_from_slice(&scratch.w_node0);
    // The quadrature adjoints pass through the node unchanged.
    Ok(())
}

/// One reverse step for an endpoint objective, exposed for direct use in
/// tests and custom drivers. Allocates its own scratch; the solver entry
/// points reuse buffers across steps instead.
pub fn adjoint_step<T: Real>(
    tableau: &ButcherTableau<T>,
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    checkpoint: &Checkpoint<T>,
    alpha: &[T],
    state: &mut AdjointState<T>,
) -> Result<()> {
    let mut scratch = SweepScratch::new(tableau, tape, None, state.m, ws.lanes())?;
    reverse_step(tableau, tape, ws, checkpoint, alpha, state, &mut scratch, None)
}

/// Discrete quadrature of a recorded integrand along a trajectory:
/// `q_i = sum_n dt^n sum_m b_m R_i(u^{m,n}, alpha, t^{m,n})`, accumulated in
/// step order.
pub fn accumulate_quadrature<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    trajectory: &Trajectory<T>,
    r_tape: &Tape<T>,
) -> Result<Vec<T>> {
    if r_tape.n_state() != problem.dim() || r_tape.n_param() != problem.n_param() {
        return Err(Error::Dimension {
            what: "integrand tape inputs",
            expected: problem.dim() + problem.n_param(),
            got: r_tape.n_state() + r_tape.n_param(),
        });
    }
    let n = problem.dim();
    let s = tableau.stages();
    let m_out = r_tape.n_out();
    let b = tableau.b();
    let c = tableau.c();
    let mut ws = ReplayWorkspace::new(&problem.tape, 1)?;
    let mut r_ws = ReplayWorkspace::new(r_tape, 1)?;
    let mut k = vec![T::zero(); s * n];
    let mut u_stage = vec![T::zero(); s * n];
    let mut r_out = vec![T::zero(); m_out];
    let mut q = vec![T::zero(); m_out];

    for cp in trajectory.checkpoints() {
        {
            let mut rhs = TapeRhs::new(&problem.tape, &mut ws, &problem.alpha)?;
            eval_stages(tableau, &mut rhs, &cp.state, cp.t, cp.dt, &mut k, &mut u_stage)?;
        }
        for m0 in 0..s {
            let t_m = cp.t + c[m0] * cp.dt;
            let u_m = &u_stage[m0 * n..(m0 + 1) * n];
            forward_eval_into(r_tape, &mut r_ws, u_m, &problem.alpha, t_m, &mut r_out)?;
            let coef = cp.dt * b[m0];
            for i in 0..m_out {
                q[i] = q[i] + coef * r_out[i];
            }
        }
    }
    Ok(q)
}

/// Runs the reverse pass over an existing trajectory.
///
/// This is the core of [`solve`]; it is public so that callers who already
/// own a trajectory (for example from a frozen-schedule replay) can
/// differentiate it directly.
pub fn adjoint_sweep<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    trajectory: &Trajectory<T>,
    objective: &Objective<T>,
    options: &AdjointOptions,
) -> Result<SensitivityResult<T>> {
    let n = problem.dim();
    let p = problem.n_param();
    let m = objective.m();
    if let Some(rt) = objective.r_tape() {
        if rt.n_state() != n || rt.n_param() != p {
            return Err(Error::Dimension {
                what: "trajectory cost tape inputs",
                expected: n + p,
                got: rt.n_state() + rt.n_param(),
            });
        }
    }

    let started = Instant::now();
    let args = ObjectiveArgs {
        u0: &problem.u0,
        u_final: trajectory.final_state(),
        alpha: &problem.alpha,
    };
    let seed_w = objective.d_final_of(&args, n)?;
    let seed_alpha = objective.d_alpha_of(&args, p)?;
    let mut state = AdjointState::new(&seed_w, seed_alpha.as_ref(), p);
    if objective.r_tape().is_some() {
        state = state.with_trajectory_cost();
    }

    let mut ws = ReplayWorkspace::new(&problem.tape, options.lanes)?;
    let mut scratch = SweepScratch::new(tableau, &problem.tape, objective.r_tape(), m, options.lanes)?;
    for (rev_index, cp) in trajectory.checkpoints().iter().rev().enumerate() {
        reverse_step(
            tableau,
            &problem.tape,
            &mut ws,
            cp,
            &problem.alpha,
            &mut state,
            &mut scratch,
            objective.r_tape(),
        )?;
        if !state.is_finite() {
            return Err(Error::AdjointDivergence { step: rev_index });
        }
    }

    // Objective value, including the quadrature part when present.
    let mut psi = objective.value_of(&args)?;
    if let Some(rt) = objective.r_tape() {
        let q = accumulate_quadrature(problem, tableau, trajectory, rt)?;
        for (pv, qv) in psi.iter_mut().zip(q) {
            *pv = *pv + qv;
        }
    }

    // dpsi/du0 picks up the explicit dependence of E on the initial state.
    let mut d_u0 = Array2::from_shape_vec((m, n), state.w.clone())
        .map_err(|_| Error::Config("adjoint buffer shape".into()))?;
    if let Some(d_init) = objective.d_initial_of(&args, n)? {
        d_u0 = d_u0 + &d_init;
    }
    let d_alpha = Array2::from_shape_vec((m, p), state.alpha_bar.clone())
        .map_err(|_| Error::Config("adjoint buffer shape".into()))?;

    if d_alpha.iter().any(|x| !x.is_finite()) || d_u0.iter().any(|x| !x.is_finite()) {
        return Err(Error::AdjointDivergence {
            step: trajectory.len(),
        });
    }

    Ok(SensitivityResult {
        psi,
        d_u0,
        d_alpha,
        stats: SolveStats {
            accepted: trajectory.len(),
            rejected: trajectory.rejected(),
            forward_seconds: 0.0,
            reverse_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Forward solve plus reverse pass.
pub fn solve<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
    objective: &Objective<T>,
    options: &AdjointOptions,
) -> Result<SensitivityResult<T>> {
    let started = Instant::now();
    let (_, trajectory) = integrate(problem, tableau, stepping)?;
    let forward_seconds = started.elapsed().as_secs_f64();
    let mut result = adjoint_sweep(problem, tableau, &trajectory, objective, options)?;
    result.stats.forward_seconds = forward_seconds;
    Ok(result)
}

/// Adaptive solve differentiated for an endpoint objective.
pub fn solve_endpoint<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    controller: &StepController<T>,
    objective: &Objective<T>,
) -> Result<SensitivityResult<T>> {
    solve(
        problem,
        tableau,
        &Stepping::Adaptive(controller.clone()),
        objective,
        &AdjointOptions::default(),
    )
}

/// Fixed-step solve differentiated for an endpoint objective.
pub fn solve_endpoint_fixed<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    dt: T,
    objective: &Objective<T>,
) -> Result<SensitivityResult<T>> {
    solve(
        problem,
        tableau,
        &Stepping::Fixed(dt),
        objective,
        &AdjointOptions::default(),
    )
}

/// Adaptive solve differentiated for an objective with a running cost.
pub fn solve_with_trajectory_cost<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    controller: &StepController<T>,
    objective: &Objective<T>,
) -> Result<SensitivityResult<T>> {
    if objective.r_tape().is_none() {
        return Err(Error::Config(
            "objective has no trajectory cost integrand".into(),
        ));
    }
    solve(
        problem,
        tableau,
        &Stepping::Adaptive(controller.clone()),
        objective,
        &AdjointOptions::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::integrate_fixed;
    use crate::tape::record;

    fn linear_problem(alpha: f64, u0: f64, t0: f64, tf: f64) -> OdeProblem<f64> {
        let tape = record(1, 1, |rec| Ok(vec![rec.param(0) * rec.state(0)])).unwrap();
        OdeProblem::new(tape, vec![u0], vec![alpha], t0, tf).unwrap()
    }

    #[test]
    fn single_euler_step_by_hand() {
        // u' = alpha*u, u0 = 1, alpha = 0.5, dt = 0.1, unit seed.
        // Expected: dpsi/du0 = 1 + dt*alpha = 1.05, dpsi/dalpha = dt*u0 = 0.1.
        let problem = linear_problem(0.5, 1.0, 0.0, 0.1);
        let tab = ButcherTableau::euler();
        let mut ws = ReplayWorkspace::new(&problem.tape, 1).unwrap();
        let cp = Checkpoint {
            t: 0.0,
            dt: 0.1,
            state: vec![1.0],
        };
        let seed = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let mut state = AdjointState::new(&seed, None, 1);
        adjoint_step(&tab, &problem.tape, &mut ws, &cp, &problem.alpha, &mut state).unwrap();
        assert!((state.w()[0] - 1.05).abs() < 1e-15);
        assert!((state.alpha_bar()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn recomputed_stages_match_the_forward_step_bitwise() {
        let problem = linear_problem(1.0, 1.0, 0.0, 1.0);
        let tab = ButcherTableau::rk4();
        let mut ws = ReplayWorkspace::new(&problem.tape, 1).unwrap();
        let fwd = crate::forward::rk_step(
            &tab,
            &problem.tape,
            &mut ws,
            &[1.0],
            &problem.alpha,
            0.0,
            0.1,
        )
        .unwrap();
        let (_, derivs) = recompute_stages(
            &tab,
            &problem.tape,
            &mut ws,
            &[1.0],
            &problem.alpha,
            0.0,
            0.1,
        )
        .unwrap();
        assert_eq!(fwd.stages, derivs);
        assert_eq!(derivs[3], vec![1.10525]);
    }

    #[test]
    fn linear_solve_matches_analytic_gradients() {
        // psi = u(tf) = u0*exp(alpha*tf): dpsi/dalpha = tf*psi,
        // dpsi/du0 = exp(alpha*tf).
        let problem = linear_problem(0.5, 1.0, 0.0, 1.0);
        let tab = ButcherTableau::cash_karp();
        let ctrl = StepController::from_tol(1e-10);
        let obj = Objective::final_state(1);
        let res = solve_endpoint(&problem, &tab, &ctrl, &obj).unwrap();
        let exact = 0.5f64.exp();
        assert!((res.psi[0] - exact).abs() < 1e-8);
        assert!((res.d_u0[(0, 0)] - exact).abs() < 1e-8);
        assert!((res.d_alpha[(0, 0)] - exact).abs() < 1e-8);
        assert!(res.stats.accepted > 0);
    }

    #[test]
    fn initial_state_objective_has_exact_trivial_gradient() {
        let problem = linear_problem(0.5, 2.0, 0.0, 1.0);
        let tab = ButcherTableau::cash_karp();
        let ctrl = StepController::from_tol(1e-8);
        let obj = Objective::new(
            1,
            Box::new(|args| vec![args.u0[0]]),
            Box::new(|_| Array2::zeros((1, 1))),
        )
        .with_initial_partial(Box::new(|_| Array2::eye(1)));
        let res = solve_endpoint(&problem, &tab, &ctrl, &obj).unwrap();
        assert_eq!(res.psi, vec![2.0]);
        assert_eq!(res.d_u0[(0, 0)], 1.0);
        assert_eq!(res.d_alpha[(0, 0)], 0.0);
    }

    #[test]
    fn parameter_only_objective_uses_the_explicit_partial() {
        let problem = linear_problem(0.5, 1.0, 0.0, 1.0);
        let tab = ButcherTableau::cash_karp();
        let ctrl = StepController::from_tol(1e-8);
        let obj = Objective::new(
            1,
            Box::new(|args| vec![args.alpha[0] * args.alpha[0]]),
            Box::new(|_| Array2::zeros((1, 1))),
        )
        .with_alpha_partial(Box::new(|args| {
            Array2::from_shape_vec((1, 1), vec![2.0 * args.alpha[0]]).unwrap()
        }));
        let res = solve_endpoint(&problem, &tab, &ctrl, &obj).unwrap();
        assert_eq!(res.psi, vec![0.25]);
        assert_eq!(res.d_alpha[(0, 0)], 1.0);
        assert_eq!(res.d_u0[(0, 0)], 0.0);
    }

    #[test]
    fn trajectory_cost_matches_the_analytic_integral() {
        // R = u over u' = alpha*u, u0 = 1, [0, 1]:
        // psi = (exp(alpha) - 1)/alpha, dpsi/dalpha = (alpha*e^a - e^a + 1)/a^2,
        // dpsi/du0 = psi.
        let problem = linear_problem(0.5, 1.0, 0.0, 1.0);
        let tab = ButcherTableau::cash_karp();
        let ctrl = StepController::from_tol(1e-10);
        let r_tape = record(1, 1, |rec| Ok(vec![rec.state(0)])).unwrap();
        let obj = Objective::trajectory_only(1, r_tape).unwrap();
        let res = solve_with_trajectory_cost(&problem, &tab, &ctrl, &obj).unwrap();
        let ea = 0.5f64.exp();
        let psi = (ea - 1.0) / 0.5;
        let dpsi = (0.5 * ea - ea + 1.0) / 0.25;
        assert!((res.psi[0] - psi).abs() < 1e-6, "psi = {}", res.psi[0]);
        assert!(
            (res.d_alpha[(0, 0)] - dpsi).abs() < 1e-6,
            "d_alpha = {} vs {}",
            res.d_alpha[(0, 0)],
            dpsi
        );
        assert!((res.d_u0[(0, 0)] - psi).abs() < 1e-6);
    }

    #[test]
    fn constant_state_quadrature_has_unit_initial_gradient() {
        // u' = 0 (parameter unused), R = u: psi = u0*(tf - t0), so
        // dpsi/du0 = tf - t0 = 1 up to the roundoff of summing the steps.
        let tape = record(1, 1, |rec| {
            let zero = rec.constant(0.0);
            Ok(vec![zero * rec.param(0)])
        })
        .unwrap();
        let problem = OdeProblem::new(tape, vec![3.0f64], vec![0.7], 0.0, 1.0).unwrap();
        let tab = ButcherTableau::cash_karp();
        let r_tape = record(1, 1, |rec| Ok(vec![rec.state(0)])).unwrap();
        let obj = Objective::trajectory_only(1, r_tape).unwrap();
        let ctrl = StepController::from_tol(1e-8);
        let res = solve_with_trajectory_cost(&problem, &tab, &ctrl, &obj).unwrap();
        assert!((res.psi[0] - 3.0).abs() < 1e-12);
        assert!((res.d_u0[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(res.d_alpha[(0, 0)], 0.0);
    }

    #[test]
    fn zero_running_cost_reproduces_the_endpoint_result_bitwise() {
        let problem = linear_problem(0.8, 1.2, 0.0, 1.5);
        let tab = ButcherTableau::cash_karp();
        let ctrl = StepController::from_tol(1e-9);
        let endpoint = Objective::final_state(1);
        let base = solve_endpoint(&problem, &tab, &ctrl, &endpoint).unwrap();

        let zero_r = record(1, 1, |rec| {
            let zero = rec.constant(0.0);
            Ok(vec![zero * rec.state(0)])
        })
        .unwrap();
        let with_r = Objective::final_state(1).with_trajectory_cost(zero_r).unwrap();
        let augmented = solve_with_trajectory_cost(&problem, &tab, &ctrl, &with_r).unwrap();
        assert_eq!(base.psi, augmented.psi);
        assert_eq!(base.d_u0, augmented.d_u0);
        assert_eq!(base.d_alpha, augmented.d_alpha);
    }

    #[test]
    fn fixed_step_euler_gradient_is_the_exact_product_rule() {
        // Two Euler steps of u' = alpha*u with dt = 0.5:
        // u2 = (1 + 0.5*alpha)^2 * u0. At alpha = 1: dpsi/du0 = 2.25,
        // dpsi/dalpha = 2*(1.5)*0.5*u0 = 1.5.
        let problem = linear_problem(1.0, 1.0, 0.0, 1.0);
        let tab = ButcherTableau::euler();
        let obj = Objective::final_state(1);
        let res = solve_endpoint_fixed(&problem, &tab, 0.5, &obj).unwrap();
        assert!((res.d_u0[(0, 0)] - 2.25).abs() < 1e-15);
        assert!((res.d_alpha[(0, 0)] - 1.5).abs() < 1e-15);
        let (u, _) = integrate_fixed(&problem, &tab, 0.5).unwrap();
        assert_eq!(res.psi, u);
    }

    #[test]
    fn trajectory_cost_requires_an_integrand() {
        let problem = linear_problem(1.0, 1.0, 0.0, 1.0);
        let err = solve_with_trajectory_cost(
            &problem,
            &ButcherTableau::cash_karp(),
            &StepController::from_tol(1e-8),
            &Objective::final_state(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn objective_shape_mismatches_are_caught() {
        let problem = linear_problem(1.0, 1.0, 0.0, 1.0);
        let obj = Objective::new(
            1,
            Box::new(|_| vec![0.0]),
            Box::new(|_| Array2::zeros((2, 3))),
        );
        let err = solve_endpoint(
            &problem,
            &ButcherTableau::cash_karp(),
            &StepController::from_tol(1e-8),
            &obj,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }
}
