//! Forward integration: explicit Runge-Kutta stepping with embedded error
//! control and checkpointing.
//!
//! The integrator stores one checkpoint `(t^n, dt^n, u^n)` per accepted step
//! and nothing else; stage values are recomputed on demand by the reverse
//! pass. Stage evaluation lives in one shared routine ([`eval_stages`]) with a
//! fixed accumulation order, so recomputed stages are bitwise identical to the
//! ones the forward pass used.
//!
//! Step-size control follows the scaled-error rule: each component of the
//! embedded error estimate is divided by `eps_abs + eps_rel * (|u_i| +
//! |du_i|)` where `du` is the step increment, the norm `v` of that ratio is
//! compared against fixed thresholds, and the step size is rescaled by
//! `max(0.9 / v^(order_low - 1), 0.2)` on rejection (`v > 1`) or
//! `min(0.9 / v^order_high, 5)` on an accepted step with `v < 0.5`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tableau::ButcherTableau;
use crate::tape::{forward_eval_into, ReplayWorkspace, Tape};

/// Right-hand side evaluator. The integrator is written against this trait so
/// tape-backed problems and the augmented systems of the reference methods
/// share one stepping code path.
pub trait OdeRhs<T: Real> {
    /// State dimension.
    fn dim(&self) -> usize;
    /// Writes `du/dt` at `(u, t)` into `out`.
    fn eval(&mut self, u: &[T], t: T, out: &mut [T]) -> Result<()>;
}

/// Tape-backed right-hand side with a fixed parameter vector.
pub struct TapeRhs<'a, T: Real> {
    tape: &'a Tape<T>,
    ws: &'a mut ReplayWorkspace<T>,
    alpha: &'a [T],
}

impl<'a, T: Real> TapeRhs<'a, T> {
    pub fn new(tape: &'a Tape<T>, ws: &'a mut ReplayWorkspace<T>, alpha: &'a [T]) -> Result<Self> {
        if tape.n_out() != tape.n_state() {
            return Err(Error::Dimension {
                what: "right-hand side outputs",
                expected: tape.n_state(),
                got: tape.n_out(),
            });
        }
        if alpha.len() != tape.n_param() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: tape.n_param(),
                got: alpha.len(),
            });
        }
        Ok(TapeRhs { tape, ws, alpha })
    }
}

impl<'a, T: Real> OdeRhs<T> for TapeRhs<'a, T> {
    fn dim(&self) -> usize {
        self.tape.n_state()
    }

    fn eval(&mut self, u: &[T], t: T, out: &mut [T]) -> Result<()> {
        forward_eval_into(self.tape, self.ws, u, self.alpha, t, out)
    }
}

/// An initial value problem `du/dt = F(u, alpha, t)` with the right-hand side
/// given as a recorded tape.
#[derive(Debug, Clone)]
pub struct OdeProblem<T> {
    pub tape: Tape<T>,
    pub u0: Vec<T>,
    pub alpha: Vec<T>,
    pub t0: T,
    pub tf: T,
}

impl<T: Real> OdeProblem<T> {
    /// Validates dimensions and the time interval (`tf >= t0`; an empty
    /// interval is allowed and integrates to the initial state).
    pub fn new(tape: Tape<T>, u0: Vec<T>, alpha: Vec<T>, t0: T, tf: T) -> Result<Self> {
        if tape.n_out() != tape.n_state() {
            return Err(Error::Dimension {
                what: "right-hand side outputs",
                expected: tape.n_state(),
                got: tape.n_out(),
            });
        }
        if u0.len() != tape.n_state() {
            return Err(Error::Dimension {
                what: "initial state",
                expected: tape.n_state(),
                got: u0.len(),
            });
        }
        if alpha.len() != tape.n_param() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: tape.n_param(),
                got: alpha.len(),
            });
        }
        if !(tf >= t0) || !t0.is_finite() || !tf.is_finite() {
            return Err(Error::Config(format!(
                "time interval [{}, {}] must be finite with tf >= t0",
                t0, tf
            )));
        }
        Ok(OdeProblem {
            tape,
            u0,
            alpha,
            t0,
            tf,
        })
    }

    /// State dimension `N`.
    pub fn dim(&self) -> usize {
        self.u0.len()
    }

    /// Parameter count `P`.
    pub fn n_param(&self) -> usize {
        self.alpha.len()
    }
}

/// Norm applied to the vector of scaled error components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    /// Maximum of the scaled components. The default.
    #[default]
    Inf,
    /// Root mean square of the scaled components.
    Rms,
}

/// Tolerances and limits for adaptive step-size control.
#[derive(Debug, Clone)]
pub struct StepController<T> {
    pub eps_abs: T,
    pub eps_rel: T,
    pub norm: ErrorNorm,
    /// Initial step; `None` means a hundredth of the interval.
    pub dt_init: Option<T>,
    /// Maximum consecutive rejections at a single step before giving up.
    pub max_rejects: usize,
    /// When true (the default) the error weights use the raw step increment
    /// `dt * sum(b_m k_m)`; when false the increment is divided by `dt`,
    /// weighting by the derivative magnitude instead.
    pub dt_weighted_increment: bool,
}

impl<T: Real> StepController<T> {
    pub fn new(eps_abs: T, eps_rel: T) -> Self {
        StepController {
            eps_abs,
            eps_rel,
            norm: ErrorNorm::Inf,
            dt_init: None,
            max_rejects: 50,
            dt_weighted_increment: true,
        }
    }

    /// Same absolute and relative tolerance, the common benchmarking setup.
    pub fn from_tol(tol: T) -> Self {
        Self::new(tol, tol)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_abs > T::zero()) {
            return Err(Error::Config(format!(
                "absolute tolerance must be positive, got {}",
                self.eps_abs
            )));
        }
        if !(self.eps_rel >= T::zero()) {
            return Err(Error::Config(format!(
                "relative tolerance must be non-negative, got {}",
                self.eps_rel
            )));
        }
        if let Some(dt) = self.dt_init {
            if !(dt > T::zero()) {
                return Err(Error::Config(format!(
                    "initial step must be positive, got {dt}"
                )));
            }
        }
        if self.max_rejects == 0 {
            return Err(Error::Config("max_rejects must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scaled error norm `v` for one step attempt.
///
/// `du` is the solution increment entering the weights; callers apply the
/// controller's increment weighting before passing it in.
pub fn error_norm<T: Real>(err: &[T], u: &[T], du: &[T], controller: &StepController<T>) -> T {
    let mut acc = T::zero();
    let n = err.len();
    for i in 0..n {
        let weight = controller.eps_abs + controller.eps_rel * (u[i].abs() + du[i].abs());
        let v = err[i].abs() / weight;
        match controller.norm {
            ErrorNorm::Inf => acc = acc.max(v),
            ErrorNorm::Rms => acc += v * v,
        }
    }
    match controller.norm {
        ErrorNorm::Inf => acc,
        ErrorNorm::Rms => (acc / T::of(n as f64)).sqrt(),
    }
}

/// Three-branch step-size update. Returns the next step size and whether the
/// attempted step is accepted.
///
/// - `v > 1`: reject, shrink by `max(0.9 / v^(order_low - 1), 0.2)`.
/// - `v < 0.5`: accept, grow by `min(0.9 / v^order_high, 5)`.
/// - otherwise: accept and keep the step size.
pub fn propose_step<T: Real>(v: T, dt: T, order_high: u32, order_low: u32) -> (T, bool) {
    let one = T::one();
    let nine_tenths = T::of(0.9);
    if v > one {
        let shrink = (nine_tenths / v.powi(order_low as i32 - 1)).max(T::of(0.2));
        (dt * shrink, false)
    } else if v < T::of(0.5) {
        let grow = (nine_tenths / v.powi(order_high as i32)).min(T::of(5.0));
        (dt * grow, true)
    } else {
        (dt, true)
    }
}

/// One accepted step's restart data: everything the reverse pass needs to
/// recompute the stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub t: T,
    pub dt: T,
    pub state: Vec<T>,
}

/// The accepted steps of one forward solve.
///
/// Storage is `(T + 1) * N` state values (one per accepted step plus the final
/// state) and `T` time records; no stage values are kept.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    checkpoints: Vec<Checkpoint<T>>,
    final_state: Vec<T>,
    final_t: T,
    rejected: usize,
}

impl<T: Real> Trajectory<T> {
    /// Number of accepted steps.
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Checkpoints in step order.
    pub fn checkpoints(&self) -> &[Checkpoint<T>] {
        &self.checkpoints
    }

    /// State at the final time.
    pub fn final_state(&self) -> &[T] {
        &self.final_state
    }

    pub fn final_t(&self) -> T {
        self.final_t
    }

    /// Total rejected step attempts during the solve.
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    /// The `(t, dt)` sequence of the accepted steps, for replaying the exact
    /// discretisation against perturbed inputs.
    pub fn schedule(&self) -> Vec<(T, T)> {
        self.checkpoints.iter().map(|c| (c.t, c.dt)).collect()
    }

    /// Stored state values, for memory accounting: `(len + 1) * N`.
    pub fn stored_state_values(&self) -> usize {
        self.checkpoints.iter().map(|c| c.state.len()).sum::<usize>() + self.final_state.len()
    }
}

/// How to drive the forward solve.
#[derive(Debug, Clone)]
pub enum Stepping<T> {
    /// Embedded error control with the given controller.
    Adaptive(StepController<T>),
    /// Uniform steps of the given size; the last step is shortened to land on
    /// the final time.
    Fixed(T),
}

/// Result of one explicit Runge-Kutta step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub u_next: Vec<T>,
    /// Embedded error estimate; all zeros for tableaus without one.
    pub error: Vec<T>,
    /// Stage derivatives `k^1 .. k^s`.
    pub stages: Vec<Vec<T>>,
}

/// Evaluates all stage states and stage derivatives for one step.
///
/// `k` and `u_stage` are `s * n` buffers holding one row per stage. The
/// accumulation order (stages ascending, within a stage the contributions of
/// earlier stages ascending) is fixed; calling this twice with the same inputs
/// gives bitwise identical rows, which the reverse pass relies on.
pub(crate) fn eval_stages<T: Real, R: OdeRhs<T> + ?Sized>(
    tableau: &ButcherTableau<T>,
    rhs: &mut R,
    u: &[T],
    t: T,
    dt: T,
    k: &mut [T],
    u_stage: &mut [T],
) -> Result<()> {
    let n = u.len();
    let s = tableau.stages();
    debug_assert_eq!(k.len(), s * n);
    debug_assert_eq!(u_stage.len(), s * n);
    let a = tableau.a();
    let c = tableau.c();
    for m in 0..s {
        {
            let (head, tail) = u_stage.split_at_mut(m * n);
            let us = &mut tail[..n];
            us.copy_from_slice(u);
            let _ = head;
            for j in 0..m {
                let coef = dt * a[m][j];
                let kj = &k[j * n..(j + 1) * n];
                for i in 0..n {
                    us[i] = us[i] + coef * kj[i];
                }
            }
        }
        let t_m = t + c[m] * dt;
        let us = &u_stage[m * n..(m + 1) * n];
        let k_m = &mut k[m * n..(m + 1) * n];
        rhs.eval(us, t_m, k_m)?;
    }
    Ok(())
}

/// Accumulates `dt * sum_m weights[m] * k[m]` into `out` (overwriting it).
fn weighted_increment<T: Real>(weights: &[T], dt: T, k: &[T], n: usize, out: &mut [T]) {
    out.fill(T::zero());
    for (m, &w) in weights.iter().enumerate() {
        let coef = dt * w;
        let km = &k[m * n..(m + 1) * n];
        for i in 0..n {
            out[i] = out[i] + coef * km[i];
        }
    }
}

/// Like [`weighted_increment`] but with the difference of two weight vectors,
/// used for the embedded error estimate.
fn weighted_difference<T: Real>(b: &[T], b_star: &[T], dt: T, k: &[T], n: usize, out: &mut [T]) {
    out.fill(T::zero());
    for m in 0..b.len() {
        let coef = dt * (b[m] - b_star[m]);
        let km = &k[m * n..(m + 1) * n];
        for i in 0..n {
            out[i] = out[i] + coef * km[i];
        }
    }
}

struct StepBufs<T> {
    k: Vec<T>,
    u_stage: Vec<T>,
    increment: Vec<T>,
    error: Vec<T>,
    u_next: Vec<T>,
    weight: Vec<T>,
}

impl<T: Real> StepBufs<T> {
    fn new(s: usize, n: usize) -> Self {
        StepBufs {
            k: vec![T::zero(); s * n],
            u_stage: vec![T::zero(); s * n],
            increment: vec![T::zero(); n],
            error: vec![T::zero(); n],
            u_next: vec![T::zero(); n],
            weight: vec![T::zero(); n],
        }
    }

    /// Runs the stages and fills `u_next`, `increment`, and (for adaptive
    /// tableaus) `error`.
    fn attempt<R>(&mut self, tableau: &ButcherTableau<T>, rhs: &mut R, u: &[T], t: T, dt: T) -> Result<()>
    where
        R: OdeRhs<T> + ?Sized,
    {
        let n = u.len();
        eval_stages(tableau, rhs, u, t, dt, &mut self.k, &mut self.u_stage)?;
        weighted_increment(tableau.b(), dt, &self.k, n, &mut self.increment);
        for i in 0..n {
            self.u_next[i] = u[i] + self.increment[i];
        }
        if let Some(b_star) = tableau.b_star() {
            weighted_difference(tableau.b(), b_star, dt, &self.k, n, &mut self.error);
        }
        Ok(())
    }

    fn all_finite(&self, adaptive: bool) -> bool {
        self.u_next.iter().all(|x| x.is_finite())
            && (!adaptive || self.error.iter().all(|x| x.is_finite()))
    }
}

/// One explicit Runge-Kutta step of a tape-backed right-hand side.
pub fn rk_step<T: Real>(
    tableau: &ButcherTableau<T>,
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    u: &[T],
    alpha: &[T],
    t: T,
    dt: T,
) -> Result<StepOutput<T>> {
    let mut rhs = TapeRhs::new(tape, ws, alpha)?;
    if u.len() != rhs.dim() {
        return Err(Error::Dimension {
            what: "state vector",
            expected: rhs.dim(),
            got: u.len(),
        });
    }
    let n = u.len();
    let mut bufs = StepBufs::new(tableau.stages(), n);
    bufs.attempt(tableau, &mut rhs, u, t, dt)?;
    let stages = (0..tableau.stages())
        .map(|m| bufs.k[m * n..(m + 1) * n].to_vec())
        .collect();
    Ok(StepOutput {
        u_next: bufs.u_next,
        error: bufs.error,
        stages,
    })
}

fn empty_trajectory<T: Real>(u0: &[T], t0: T) -> Trajectory<T> {
    Trajectory {
        checkpoints: Vec::new(),
        final_state: u0.to_vec(),
        final_t: t0,
        rejected: 0,
    }
}

/// Adaptive integration of a generic right-hand side. Returns the final state
/// and the checkpointed trajectory.
pub fn integrate_adaptive_rhs<T: Real, R: OdeRhs<T> + ?Sized>(
    rhs: &mut R,
    u0: &[T],
    t0: T,
    tf: T,
    tableau: &ButcherTableau<T>,
    controller: &StepController<T>,
) -> Result<(Vec<T>, Trajectory<T>)> {
    if !tableau.is_adaptive() {
        return Err(Error::Config(format!(
            "tableau '{}' has no embedded weights; use fixed stepping",
            tableau.name()
        )));
    }
    controller.validate()?;
    if tf == t0 {
        return Ok((u0.to_vec(), empty_trajectory(u0, t0)));
    }

    let n = u0.len();
    let mut bufs = StepBufs::new(tableau.stages(), n);
    let mut checkpoints = Vec::new();
    let mut rejected = 0usize;
    let mut u = u0.to_vec();
    let mut t = t0;
    let mut dt = controller.dt_init.unwrap_or((tf - t0) * T::of(0.01));
    let order_high = tableau.order_high();
    let order_low = tableau.order_low();

    loop {
        let remaining = tf - t;
        let clamped = dt >= remaining;
        if clamped {
            dt = remaining;
        }

        let mut consecutive = 0usize;
        let (accepted_dt, was_clamped) = loop {
            bufs.attempt(tableau, rhs, &u, t, dt)?;
            if !bufs.all_finite(true) {
                return Err(Error::Divergence { t: t.as_f64() });
            }
            if controller.dt_weighted_increment {
                bufs.weight.copy_from_slice(&bufs.increment);
            } else {
                for i in 0..n {
                    bufs.weight[i] = bufs.increment[i] / dt;
                }
            }
            let v = error_norm(&bufs.error, &u, &bufs.weight, controller);
            let (dt_next, accept) = propose_step(v, dt, order_high, order_low);
            if accept {
                let used = dt;
                let was_clamped = used == remaining;
                dt = dt_next;
                break (used, was_clamped);
            }
            rejected += 1;
            consecutive += 1;
            if consecutive > controller.max_rejects {
                return Err(Error::StepFailure {
                    t: t.as_f64(),
                    error_ratio: v.as_f64(),
                    rejects: consecutive,
                });
            }
            dt = dt_next;
        };

        checkpoints.push(Checkpoint {
            t,
            dt: accepted_dt,
            state: u.clone(),
        });
        u.copy_from_slice(&bufs.u_next);
        if was_clamped {
            break;
        }
        t = t + accepted_dt;
    }

    let trajectory = Trajectory {
        checkpoints,
        final_state: u.clone(),
        final_t: tf,
        rejected,
    };
    Ok((u, trajectory))
}

/// Adaptive integration of a tape-backed problem.
pub fn integrate_adaptive<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    controller: &StepController<T>,
) -> Result<(Vec<T>, Trajectory<T>)> {
    let mut ws = ReplayWorkspace::new(&problem.tape, 1)?;
    let mut rhs = TapeRhs::new(&problem.tape, &mut ws, &problem.alpha)?;
    integrate_adaptive_rhs(&mut rhs, &problem.u0, problem.t0, problem.tf, tableau, controller)
}

/// Number of uniform steps needed to cover `[t0, tf]` with step `dt`:
/// `ceil((tf - t0) / dt)`, robust against the ratio sitting a few ulps above
/// an integer.
fn fixed_step_count<T: Real>(t0: T, tf: T, dt: T) -> usize {
    let ratio = (tf - t0) / dt;
    let rounded = ratio.round();
    let steps = if rounded >= T::one() && (ratio - rounded).abs() <= ratio * T::epsilon() * T::of(4.0) {
        rounded
    } else {
        ratio.ceil()
    };
    steps.as_f64() as usize
}

/// Fixed-step integration of a generic right-hand side.
pub fn integrate_fixed_rhs<T: Real, R: OdeRhs<T> + ?Sized>(
    rhs: &mut R,
    u0: &[T],
    t0: T,
    tf: T,
    tableau: &ButcherTableau<T>,
    dt: T,
) -> Result<(Vec<T>, Trajectory<T>)> {
    if !(dt > T::zero()) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    if tf == t0 {
        return Ok((u0.to_vec(), empty_trajectory(u0, t0)));
    }

    let n = u0.len();
    let steps = fixed_step_count(t0, tf, dt);
    let mut bufs = StepBufs::new(tableau.stages(), n);
    let mut checkpoints = Vec::with_capacity(steps);
    let mut u = u0.to_vec();
    let mut t = t0;

    for step in 0..steps {
        let last = step + 1 == steps;
        let dt_n = if last { tf - t } else { dt };
        bufs.attempt(tableau, rhs, &u, t, dt_n)?;
        if !bufs.all_finite(false) {
            return Err(Error::Divergence { t: t.as_f64() });
        }
        checkpoints.push(Checkpoint {
            t,
            dt: dt_n,
            state: u.clone(),
        });
        u.copy_from_slice(&bufs.u_next);
        t = if last { tf } else { t + dt_n };
    }

    let trajectory = Trajectory {
        checkpoints,
        final_state: u.clone(),
        final_t: tf,
        rejected: 0,
    };
    Ok((u, trajectory))
}

/// Fixed-step integration of a tape-backed problem.
pub fn integrate_fixed<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    dt: T,
) -> Result<(Vec<T>, Trajectory<T>)> {
    let mut ws = ReplayWorkspace::new(&problem.tape, 1)?;
    let mut rhs = TapeRhs::new(&problem.tape, &mut ws, &problem.alpha)?;
    integrate_fixed_rhs(&mut rhs, &problem.u0, problem.t0, problem.tf, tableau, dt)
}

/// Integrates along a prescribed `(t, dt)` schedule with no error control.
///
/// This replays the exact discretisation of an earlier solve against modified
/// inputs, which is what finite-difference checks of the discrete gradient
/// need.
pub fn integrate_schedule_rhs<T: Real, R: OdeRhs<T> + ?Sized>(
    rhs: &mut R,
    u0: &[T],
    schedule: &[(T, T)],
    tableau: &ButcherTableau<T>,
) -> Result<(Vec<T>, Trajectory<T>)> {
    let n = u0.len();
    let mut bufs = StepBufs::new(tableau.stages(), n);
    let mut checkpoints = Vec::with_capacity(schedule.len());
    let mut u = u0.to_vec();
    let mut final_t = schedule.first().map(|&(t, _)| t).unwrap_or(T::zero());

    for &(t, dt) in schedule {
        bufs.attempt(tableau, rhs, &u, t, dt)?;
        if !bufs.all_finite(false) {
            return Err(Error::Divergence { t: t.as_f64() });
        }
        checkpoints.push(Checkpoint {
            t,
            dt,
            state: u.clone(),
        });
        u.copy_from_slice(&bufs.u_next);
        final_t = t + dt;
    }

    let trajectory = Trajectory {
        checkpoints,
        final_state: u.clone(),
        final_t,
        rejected: 0,
    };
    Ok((u, trajectory))
}

/// Schedule replay for a tape-backed problem.
pub fn integrate_schedule<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    schedule: &[(T, T)],
) -> Result<(Vec<T>, Trajectory<T>)> {
    let mut ws = ReplayWorkspace::new(&problem.tape, 1)?;
    let mut rhs = TapeRhs::new(&problem.tape, &mut ws, &problem.alpha)?;
    integrate_schedule_rhs(&mut rhs, &problem.u0, schedule, tableau)
}

/// Dispatches on the stepping mode.
pub fn integrate<T: Real>(
    problem: &OdeProblem<T>,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
) -> Result<(Vec<T>, Trajectory<T>)> {
    match stepping {
        Stepping::Adaptive(controller) => integrate_adaptive(problem, tableau, controller),
        Stepping::Fixed(dt) => integrate_fixed(problem, tableau, *dt),
    }
}

/// Generic-RHS variant of [`integrate`].
pub fn integrate_rhs<T: Real, R: OdeRhs<T> + ?Sized>(
    rhs: &mut R,
    u0: &[T],
    t0: T,
    tf: T,
    tableau: &ButcherTableau<T>,
    stepping: &Stepping<T>,
) -> Result<(Vec<T>, Trajectory<T>)> {
    match stepping {
        Stepping::Adaptive(controller) => {
            integrate_adaptive_rhs(rhs, u0, t0, tf, tableau, controller)
        }
        Stepping::Fixed(dt) => integrate_fixed_rhs(rhs, u0, t0, tf, tableau, *dt),
    }
}
