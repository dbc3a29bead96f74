//! Experiment drivers shared by the binary and the test suite.
//!
//! Each runner builds the problem, dispatches the requested sensitivity
//! methods, and returns plain row structs ready for CSV serialisation.
//! Timings wrap the sensitivity computation only (forward solve plus
//! whatever the method does on top), never problem setup.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use rkadjoint::adjoint::{solve, AdjointOptions, Objective, SensitivityResult};
use rkadjoint::ndarray::Array2;
use rkadjoint::forward::{integrate, StepController, Stepping};
use rkadjoint::reference::{casa_naive_solve, cfsa_solve, nd_sensitivity, NdOptions};
use rkadjoint::tableau::ButcherTableau;
use rkadjoint::Error;

use crate::problems::{glv, heat, vanderpol};

/// Sensitivity methods selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Discrete adjoint of the actual solver steps (this library's reverse
    /// pass).
    Adjoint,
    /// Forward differences of the full solve.
    Nd,
    /// Continuous forward (tangent) sensitivities.
    Cfsa,
    /// Continuous adjoint with a naive backward re-solve.
    Casa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Adjoint, Method::Nd, Method::Cfsa, Method::Casa];
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "adjoint" => Ok(Method::Adjoint),
            "nd" => Ok(Method::Nd),
            "cfsa" => Ok(Method::Cfsa),
            "casa" => Ok(Method::Casa),
            other => Err(format!(
                "unknown method '{other}' (expected adjoint, nd, cfsa, or casa)"
            )),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Adjoint => "adjoint",
            Method::Nd => "nd",
            Method::Cfsa => "cfsa",
            Method::Casa => "casa",
        };
        f.write_str(name)
    }
}

/// Relative inf-norm deviation in percent: `100 * max|a-b| / max|b|`.
pub fn rel_inf_error_pct(got: &[f64], want: &[f64]) -> f64 {
    let num = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let den = want.iter().map(|b| b.abs()).fold(0.0f64, f64::max);
    100.0 * num / den
}

/// Absolute inf-norm of the difference of two flat vectors.
pub fn inf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

// ---------------------------------------------------------------------------
// Heat equation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HeatRow {
    pub np: usize,
    pub method: Method,
    /// Relative inf-norm error of the final state against the closed form,
    /// in percent.
    pub forward_err_pct: f64,
    /// Same metric for the diffusivity sensitivity field.
    pub sens_err_pct: f64,
    /// "ok", or "unstable" when the method diverged or landed above 10%.
    pub status: String,
    pub seconds: f64,
}

/// Runs the requested methods on one grid size with fixed stepping.
pub fn heat_run(
    spec: &heat::HeatSpec,
    methods: &[Method],
    tableau: &ButcherTableau<f64>,
    bump: f64,
    lanes: usize,
) -> anyhow::Result<Vec<HeatRow>> {
    if spec.dt >= spec.stability_limit() {
        eprintln!(
            "warning: dt = {} exceeds the explicit stability bound {:.3e} for np = {}",
            spec.dt,
            spec.stability_limit(),
            spec.np
        );
    }
    let problem = heat::problem(spec)?;
    let n = problem.dim();
    let stepping = Stepping::Fixed(spec.dt);
    let exact_u = heat::exact_final(spec.np, spec.alpha, spec.tf);
    let exact_s = heat::exact_sensitivity(spec.np, spec.alpha, spec.tf);

    let mut rows = Vec::new();
    for &method in methods {
        let started = Instant::now();
        let outcome: Result<(Vec<f64>, Vec<f64>), Error> = match method {
            Method::Adjoint => {
                let obj = Objective::final_state(n);
                let opts = AdjointOptions { lanes };
                solve(&problem, tableau, &stepping, &obj, &opts)
                    .map(|r| (r.psi.clone(), r.d_alpha.column(0).to_vec()))
            }
            Method::Nd => {
                let obj = Objective::final_state(n);
                let opts = NdOptions {
                    bump,
                    bump_initial: false,
                };
                nd_sensitivity(&problem, tableau, &stepping, &obj, &opts)
                    .map(|r| (r.psi.clone(), r.d_alpha.column(0).to_vec()))
            }
            Method::Cfsa => cfsa_solve(&problem, tableau, &stepping, false)
                .map(|r| (r.u_final.clone(), r.d_alpha.column(0).to_vec())),
            Method::Casa => {
                let obj = Objective::final_state(n);
                casa_naive_solve(&problem, tableau, &stepping, &obj)
                    .map(|r| (r.psi.clone(), r.d_alpha.column(0).to_vec()))
            }
        };
        let seconds = started.elapsed().as_secs_f64();

        let row = match outcome {
            Ok((u_num, s_num)) => {
                let forward_err_pct = rel_inf_error_pct(&u_num, &exact_u);
                let sens_err_pct = rel_inf_error_pct(&s_num, &exact_s);
                let status = if sens_err_pct.is_finite() && sens_err_pct <= 10.0 {
                    "ok".to_string()
                } else {
                    "unstable".to_string()
                };
                HeatRow {
                    np: spec.np,
                    method,
                    forward_err_pct,
                    sens_err_pct,
                    status,
                    seconds,
                }
            }
            // Divergence inside a method is a result here, not a failure of
            // the run: the backward re-solve is expected to blow up on fine
            // grids.
            Err(Error::Divergence { .. })
            | Err(Error::AdjointDivergence { .. })
            | Err(Error::BackwardUnstable { .. }) => HeatRow {
                np: spec.np,
                method,
                forward_err_pct: f64::INFINITY,
                sens_err_pct: f64::INFINITY,
                status: "unstable".to_string(),
                seconds,
            },
            Err(e) => return Err(anyhow!(e).context(format!("heat np={} {method}", spec.np))),
        };
        rows.push(row);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Van der Pol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VdpRow {
    pub method: Method,
    pub x_tf: f64,
    pub v_tf: f64,
    pub dx_dmu: f64,
    pub dv_dmu: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub seconds: f64,
}

/// Endpoint sensitivities of both states with respect to the damping
/// strength.
pub fn vanderpol_run(
    mu: f64,
    tf: f64,
    methods: &[Method],
    tableau: &ButcherTableau<f64>,
    controller: &StepController<f64>,
    bump: f64,
    lanes: usize,
) -> anyhow::Result<Vec<VdpRow>> {
    let problem = vanderpol::problem(mu, tf)?;
    let stepping = Stepping::Adaptive(controller.clone());
    let mut rows = Vec::new();
    for &method in methods {
        let started = Instant::now();
        let r = dispatch_endpoint(&problem, tableau, &stepping, method, bump, lanes)
            .with_context(|| format!("van der pol {method}"))?;
        let seconds = started.elapsed().as_secs_f64();
        rows.push(VdpRow {
            method,
            x_tf: r.psi[0],
            v_tf: r.psi[1],
            dx_dmu: r.d_alpha[(0, 0)],
            dv_dmu: r.d_alpha[(1, 0)],
            accepted: r.stats.accepted,
            rejected: r.stats.rejected,
            seconds,
        });
    }
    Ok(rows)
}

/// Endpoint identity-objective sensitivities by any method, shaped like the
/// adjoint result.
fn dispatch_endpoint(
    problem: &rkadjoint::Problem64,
    tableau: &ButcherTableau<f64>,
    stepping: &Stepping<f64>,
    method: Method,
    bump: f64,
    lanes: usize,
) -> rkadjoint::Result<SensitivityResult<f64>> {
    let n = problem.dim();
    let obj = Objective::final_state(n);
    match method {
        Method::Adjoint => solve(problem, tableau, stepping, &obj, &AdjointOptions { lanes }),
        Method::Nd => {
            let opts = NdOptions {
                bump,
                bump_initial: false,
            };
            nd_sensitivity(problem, tableau, stepping, &obj, &opts)
        }
        Method::Casa => casa_naive_solve(problem, tableau, stepping, &obj),
        Method::Cfsa => {
            let r = cfsa_solve(problem, tableau, stepping, false)?;
            Ok(SensitivityResult {
                psi: r.u_final,
                d_u0: Array2::zeros((n, n)),
                d_alpha: r.d_alpha,
                stats: r.stats,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// GLV work-precision
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct WpRow {
    pub method: Method,
    pub n: usize,
    pub tolerance: f64,
    /// Absolute inf-norm deviation of the parameter gradient from the same
    /// method's tight-tolerance baseline.
    pub error: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub status: String,
}

/// Scalar aggregate of the final state: `psi = sum_i x_i(tf)`. Its gradient
/// has one entry per parameter, which keeps every method's output directly
/// comparable.
fn sum_objective(n: usize) -> Objective<f64> {
    Objective::new(
        1,
        Box::new(|args| vec![args.u_final.iter().sum()]),
        Box::new(move |_| Array2::ones((1, n))),
    )
}

/// Parameter gradient of the aggregate objective by the given method, plus
/// step counts of the underlying solve.
fn wp_gradient(
    problem: &rkadjoint::Problem64,
    tableau: &ButcherTableau<f64>,
    tolerance: f64,
    method: Method,
    bump: f64,
) -> rkadjoint::Result<(Vec<f64>, usize, usize)> {
    let n = problem.dim();
    let stepping = Stepping::Adaptive(StepController::from_tol(tolerance));
    match method {
        Method::Adjoint => {
            let obj = sum_objective(n);
            let r = solve(problem, tableau, &stepping, &obj, &AdjointOptions::default())?;
            Ok((
                r.d_alpha.row(0).to_vec(),
                r.stats.accepted,
                r.stats.rejected,
            ))
        }
        Method::Nd => {
            let obj = sum_objective(n);
            let opts = NdOptions {
                bump,
                bump_initial: false,
            };
            let r = nd_sensitivity(problem, tableau, &stepping, &obj, &opts)?;
            Ok((
                r.d_alpha.row(0).to_vec(),
                r.stats.accepted,
                r.stats.rejected,
            ))
        }
        Method::Casa => {
            let obj = sum_objective(n);
            let r = casa_naive_solve(problem, tableau, &stepping, &obj)?;
            Ok((
                r.d_alpha.row(0).to_vec(),
                r.stats.accepted,
                r.stats.rejected,
            ))
        }
        Method::Cfsa => {
            // Chain the tangent matrix through the aggregate objective:
            // g_k = sum_i du_i/dalpha_k.
            let r = cfsa_solve(problem, tableau, &stepping, false)?;
            let p = problem.n_param();
            let mut g = vec![0.0; p];
            for k in 0..p {
                g[k] = r.d_alpha.column(k).sum();
            }
            Ok((g, r.stats.accepted, r.stats.rejected))
        }
    }
}

/// The baseline tolerance every method is compared against.
pub const WP_BASELINE_TOL: f64 = 1e-15;

/// Work-precision sweep for one community size. Each method is anchored to
/// its own run at the baseline tolerance; the baseline appears as a row with
/// zero error. Per-method failures are recorded in the row status.
pub fn wp_run(
    spec: &glv::GlvSpec,
    methods: &[Method],
    tolerances: &[f64],
    repeats: usize,
    bump: f64,
) -> anyhow::Result<Vec<WpRow>> {
    if tolerances.windows(2).any(|w| w[0] <= w[1]) {
        bail!("tolerances must be strictly descending");
    }
    if repeats == 0 {
        bail!("repeats must be at least 1");
    }
    let problem = glv::problem(spec)?;
    let tableau = ButcherTableau::cash_karp();

    let mut rows = Vec::new();
    for &method in methods {
        let base_started = Instant::now();
        let baseline = wp_gradient(&problem, &tableau, WP_BASELINE_TOL, method, bump);
        let base_ms = base_started.elapsed().as_secs_f64() * 1e3;
        let (g_base, acc, rej) = match baseline {
            Ok(v) => v,
            Err(e) => {
                rows.push(WpRow {
                    method,
                    n: spec.n,
                    tolerance: WP_BASELINE_TOL,
                    error: f64::NAN,
                    mean_ms: base_ms,
                    std_ms: 0.0,
                    accepted: 0,
                    rejected: 0,
                    status: format!("failed: {e}"),
                });
                continue;
            }
        };
        rows.push(WpRow {
            method,
            n: spec.n,
            tolerance: WP_BASELINE_TOL,
            error: 0.0,
            mean_ms: base_ms,
            std_ms: 0.0,
            accepted: acc,
            rejected: rej,
            status: "baseline".to_string(),
        });

        for &tol in tolerances {
            let mut times_ms = Vec::with_capacity(repeats);
            let mut result = None;
            let mut failure = None;
            for _ in 0..repeats {
                let started = Instant::now();
                match wp_gradient(&problem, &tableau, tol, method, bump) {
                    Ok(r) => {
                        times_ms.push(started.elapsed().as_secs_f64() * 1e3);
                        result = Some(r);
                    }
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            let row = match (result, failure) {
                (Some((g, acc, rej)), None) => {
                    let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
                    let var = times_ms
                        .iter()
                        .map(|t| (t - mean) * (t - mean))
                        .sum::<f64>()
                        / times_ms.len() as f64;
                    WpRow {
                        method,
                        n: spec.n,
                        tolerance: tol,
                        error: inf_diff(&g, &g_base),
                        mean_ms: mean,
                        std_ms: var.sqrt(),
                        accepted: acc,
                        rejected: rej,
                        status: "ok".to_string(),
                    }
                }
                (_, Some(e)) => WpRow {
                    method,
                    n: spec.n,
                    tolerance: tol,
                    error: f64::NAN,
                    mean_ms: 0.0,
                    std_ms: 0.0,
                    accepted: 0,
                    rejected: 0,
                    status: format!("failed: {e}"),
                },
                (None, None) => unreachable!("repeats >= 1"),
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// GLV scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Runtime of the sensitivity computation against problem size. Returns the
/// rows plus the fitted log-log slope of runtime against `N + P` per method.
pub fn scaling_run(
    n_list: &[usize],
    tolerance: f64,
    methods: &[Method],
    seed: u64,
    repeats: usize,
    bump: f64,
) -> anyhow::Result<(Vec<ScalingRow>, Vec<(Method, f64)>)> {
    if repeats == 0 {
        bail!("repeats must be at least 1");
    }
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &method in methods {
        let mut points = Vec::new();
        for &n in n_list {
            let spec = glv::GlvSpec::new(n, seed);
            let problem = glv::problem(&spec)?;
            let tableau = ButcherTableau::cash_karp();
            let mut times_ms = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let started = Instant::now();
                wp_gradient(&problem, &tableau, tolerance, method, bump)
                    .with_context(|| format!("scaling n={n} {method}"))?;
                times_ms.push(started.elapsed().as_secs_f64() * 1e3);
            }
            let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
            let var = times_ms
                .iter()
                .map(|t| (t - mean) * (t - mean))
                .sum::<f64>()
                / times_ms.len() as f64;
            let p = n + n * n;
            points.push(((n + p) as f64, mean));
            rows.push(ScalingRow {
                method,
                n,
                p,
                mean_ms: mean,
                std_ms: var.sqrt(),
            });
        }
        slopes.push((method, log_log_slope(&points)));
    }
    Ok((rows, slopes))
}

// ---------------------------------------------------------------------------
// Self-check suite
// ---------------------------------------------------------------------------

/// Quick oracle suite behind the `validate` subcommand. Returns violation
/// descriptions; empty means everything held.
pub fn validate_suite() -> anyhow::Result<Vec<String>> {
    use rkadjoint::adjoint::solve_endpoint;
    use rkadjoint::forward::{integrate_schedule, propose_step};
    use rkadjoint::tape::{forward_eval, record, reverse_vjp, LaneBatch, ReplayWorkspace};

    let mut violations = Vec::new();

    // Linear ODE with a known gradient.
    {
        let tape = record(1, 1, |rec| Ok(vec![rec.param(0) * rec.state(0)]))?;
        let problem = rkadjoint::Problem64::new(tape, vec![1.0], vec![0.5], 0.0, 1.0)?;
        let obj = Objective::final_state(1);
        let r = solve_endpoint(
            &problem,
            &ButcherTableau::cash_karp(),
            &StepController::from_tol(1e-12),
            &obj,
        )?;
        let exact = 0.5f64.exp();
        if (r.d_alpha[(0, 0)] - exact).abs() > 1e-7 || (r.d_u0[(0, 0)] - exact).abs() > 1e-7 {
            violations.push(format!(
                "linear gradient off: d_alpha {} d_u0 {} vs {exact}",
                r.d_alpha[(0, 0)],
                r.d_u0[(0, 0)]
            ));
        }
    }

    // Step proposal against the bare formula on a coarse grid.
    {
        for i in 1..=30 {
            let v = i as f64 * 0.1;
            let (dt, accept) = propose_step(v, 1.0, 5, 4);
            // Shrink exponent is one less than the embedded order, growth
            // exponent is the solution order.
            let expect = if v > 1.0 {
                (0.9 / v.powi(3)).max(0.2)
            } else if v < 0.5 {
                (0.9 / v.powi(5)).min(5.0)
            } else {
                1.0
            };
            if (dt - expect).abs() > 1e-15 || accept != (v <= 1.0) {
                violations.push(format!("step proposal at v = {v}: {dt} vs {expect}"));
            }
        }
    }

    // Reverse sweeps against central differences on random tapes.
    for seed in 0..20 {
        let rt = crate::randtape::random_tape(seed)?;
        let mut ws = ReplayWorkspace::new(&rt.tape, 1)?;
        let m = rt.tape.n_out();
        let lam: Vec<f64> = (0..m).map(|i| 1.0 + 0.3 * i as f64).collect();
        forward_eval(&rt.tape, &mut ws, &rt.u, &rt.alpha, rt.t)?;
        let mut seeds = LaneBatch::new(1, m)?;
        seeds.set_lane(0, &lam)?;
        let (gx, _) = reverse_vjp(&rt.tape, &mut ws, &seeds)?;
        let h = 1e-6;
        for j in 0..rt.u.len() {
            let mut up = rt.u.clone();
            let mut dn = rt.u.clone();
            up[j] += h;
            dn[j] -= h;
            let fp = forward_eval(&rt.tape, &mut ws, &up, &rt.alpha, rt.t)?;
            let fm = forward_eval(&rt.tape, &mut ws, &dn, &rt.alpha, rt.t)?;
            let dot = |f: &[f64]| f.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>();
            let fd = (dot(&fp) - dot(&fm)) / (2.0 * h);
            let denom = gx[j].abs().max(fd.abs()).max(1.0);
            if (gx[j] - fd).abs() / denom > 1e-6 {
                violations.push(format!("vjp seed {seed} slot {j}: {} vs {fd}", gx[j]));
            }
        }
    }

    // Adjoint against central differences of the frozen discretisation on a
    // small random community.
    {
        let spec = glv::GlvSpec::new(3, 5);
        let problem = glv::problem(&spec)?;
        let tableau = ButcherTableau::cash_karp();
        let controller = StepController::from_tol(1e-10);
        let obj = sum_objective(3);
        let r = solve_endpoint(&problem, &tableau, &controller, &obj)?;
        let (_, traj) = integrate(&problem, &tableau, &Stepping::Adaptive(controller))?;
        let schedule = traj.schedule();
        let h = 1e-6;
        for k in 0..problem.n_param() {
            let mut up = problem.clone();
            let mut dn = problem.clone();
            up.alpha[k] += h;
            dn.alpha[k] -= h;
            let (fu, _) = integrate_schedule(&up, &tableau, &schedule)?;
            let (fl, _) = integrate_schedule(&dn, &tableau, &schedule)?;
            let fd = (fu.iter().sum::<f64>() - fl.iter().sum::<f64>()) / (2.0 * h);
            let got = r.d_alpha[(0, k)];
            let denom = got.abs().max(fd.abs()).max(1e-6);
            if (got - fd).abs() / denom > 1e-5 {
                violations.push(format!("glv gradient entry {k}: {got} vs {fd}"));
            }
        }
    }

    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn slope_of_an_exact_power_law_is_recovered() {
        let pts: Vec<(f64, f64)> = [10.0f64, 20.0, 40.0, 80.0]
            .iter()
            .map(|&x| (x, 3.0 * x.powf(1.3)))
            .collect();
        assert!((log_log_slope(&pts) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn relative_error_metric_is_scale_free() {
        let want = vec![2.0, -4.0];
        let got = vec![2.02, -4.0];
        assert!((rel_inf_error_pct(&got, &want) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn self_check_suite_is_clean() {
        let violations = validate_suite().unwrap();
        assert!(violations.is_empty(), "{violations:?}");
    }
}
