//! Cross checks between the reference methods: bump-size behaviour of the
//! difference quotients, four-way method agreement on a non-stiff system, and
//! the parameter-count scaling of the tangent method.

use std::time::Instant;

use rkadjoint::adjoint::{solve_endpoint, Objective};
use rkadjoint::forward::{OdeProblem, StepController, Stepping};
use rkadjoint::reference::{casa_naive_solve, cfsa_solve, nd_sensitivity, NdOptions};
use rkadjoint::tableau::ButcherTableau;
use rkadjoint::tape::record;

#[test]
fn difference_bump_tradeoff_is_visible() {
    // too-large bumps suffer truncation error, too-small bumps amplify solver
    // noise; the recommended size sits in the basin between the two
    let tape = record(1, 1, |rec| Ok(vec![rec.param(0) * rec.state(0)])).unwrap();
    let problem = OdeProblem::new(tape, vec![1.0], vec![0.5], 0.0, 1.0).unwrap();
    let tableau = ButcherTableau::cash_karp();
    let stepping = Stepping::Adaptive(StepController::from_tol(1e-12));
    let objective = Objective::final_state(1);
    let exact = 0.5f64.exp();

    let err_at = |bump: f64| {
        let options = NdOptions {
            bump,
            ..NdOptions::default()
        };
        let r = nd_sensitivity(&problem, &tableau, &stepping, &objective, &options).unwrap();
        (r.d_alpha[(0, 0)] - exact).abs()
    };

    let coarse = err_at(1e-2);
    let tuned = err_at(1e-6);
    let tiny = err_at(1e-11);
    assert!(tuned < coarse, "tuned {tuned:e} vs coarse {coarse:e}");
    assert!(tuned < tiny, "tuned {tuned:e} vs tiny {tiny:e}");
}

#[test]
fn all_four_methods_agree_on_a_nonstiff_system() {
    let tape = record(2, 2, |rec| {
        let x = rec.state(0);
        let y = rec.state(1);
        let a0 = rec.param(0);
        let a1 = rec.param(1);
        Ok(vec![a0 * y - x * x * 0.3, a1 * x - y * 0.5])
    })
    .unwrap();
    let problem = OdeProblem::new(tape, vec![0.8, 0.2], vec![0.7, 0.4], 0.0, 1.5).unwrap();
    let tableau = ButcherTableau::cash_karp();
    let controller = StepController::from_tol(1e-10);
    let stepping = Stepping::Adaptive(controller.clone());
    let objective = Objective::final_state(2);

    let adj = solve_endpoint(&problem, &tableau, &controller, &objective)
        .unwrap()
        .d_alpha;
    let cfsa = cfsa_solve(&problem, &tableau, &stepping, false).unwrap().d_alpha;
    let casa = casa_naive_solve(&problem, &tableau, &stepping, &objective)
        .unwrap()
        .d_alpha;
    let nd = nd_sensitivity(&problem, &tableau, &stepping, &objective, &NdOptions::default())
        .unwrap()
        .d_alpha;

    let inf = |a: &rkadjoint::ndarray::Array2<f64>, b: &rkadjoint::ndarray::Array2<f64>| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max)
    };

    let pairs = [
        ("adjoint/cfsa", inf(&adj, &cfsa)),
        ("adjoint/casa", inf(&adj, &casa)),
        ("adjoint/nd", inf(&adj, &nd)),
        ("cfsa/casa", inf(&cfsa, &casa)),
        ("cfsa/nd", inf(&cfsa, &nd)),
        ("casa/nd", inf(&casa, &nd)),
    ];
    for (name, diff) in pairs {
        assert!(diff < 1e-3, "{name} differ by {diff:e}");
    }
    // the two internally consistent methods track each other much tighter
    assert!(inf(&adj, &cfsa) < 1e-6, "adjoint/cfsa {:e}", inf(&adj, &cfsa));
}

/// Builds a stable test system whose tape length grows linearly with the
/// parameter count: each state relaxes towards a weighted sum over its own
/// block of parameters.
fn wide_parameter_problem(n: usize, p: usize) -> OdeProblem<f64> {
    assert_eq!(p % n, 0);
    let per = p / n;
    let tape = record(n, p, |rec| {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = rec.state(i);
            let mut acc = rec.constant(0.0);
            for k in 0..per {
                acc = acc + rec.param(i * per + k) * (1.0 / per as f64);
            }
            out.push(acc - x);
        }
        Ok(out)
    })
    .unwrap();
    let u0 = vec![0.1; n];
    let alpha: Vec<f64> = (0..p).map(|k| 0.2 + 0.001 * (k % 17) as f64).collect();
    OdeProblem::new(tape, u0, alpha, 0.0, 0.5).unwrap()
}

#[test]
fn tangent_method_cost_grows_at_least_linearly_with_parameter_count() {
    let tableau = ButcherTableau::rk4();
    let stepping = Stepping::Fixed(0.01);
    let n = 8;

    let time_solve = |p: usize| {
        let problem = wide_parameter_problem(n, p);
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let started = Instant::now();
            let r = cfsa_solve(&problem, &tableau, &stepping, false).unwrap();
            let elapsed = started.elapsed().as_secs_f64();
            assert!(r.d_alpha.iter().all(|v| v.is_finite()));
            best = best.min(elapsed);
        }
        best
    };

    let small = time_solve(2048);
    let large = time_solve(4096);
    eprintln!("tangent solve: p=2048 {small:.4}s, p=4096 {large:.4}s, ratio {:.2}", large / small);
    assert!(
        large >= 2.0 * small,
        "doubling the parameter count should at least double the cost: {small:.4}s -> {large:.4}s"
    );
}
