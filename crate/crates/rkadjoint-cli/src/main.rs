//! Command-line driver for the sensitivity benchmarks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rkadjoint::forward::StepController;
use rkadjoint::tableau::ButcherTableau;

use rkadjoint_cli::csvout::CsvDoc;
use rkadjoint_cli::problems::{glv, heat};
use rkadjoint_cli::runners::{
    heat_run, scaling_run, validate_suite, vanderpol_run, wp_run, Method,
};

#[derive(Parser)]
#[command(
    name = "rkadjoint",
    version,
    about = "Sensitivity analysis benchmarks for adaptive Runge-Kutta solvers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Heat-equation error tables against the closed-form sensitivity field.
    Heat2d(Heat2dArgs),
    /// Van der Pol endpoint sensitivities with respect to the damping.
    Vanderpol(VdpArgs),
    /// Work-precision sweep on random Lotka-Volterra communities.
    GlvWp(GlvWpArgs),
    /// Runtime scaling of the sensitivity methods with problem size.
    GlvScaling(GlvScalingArgs),
    /// Built-in oracle suite; exits nonzero on any violation.
    Validate,
}

#[derive(Args)]
struct Heat2dArgs {
    /// Grid points per side; repeat or comma-separate for several sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 30])]
    np: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Method::Adjoint])]
    method: Vec<Method>,
    #[arg(long, default_value = "euler")]
    tableau: String,
    /// Fixed step size.
    #[arg(long, default_value_t = 5e-5)]
    dt: f64,
    #[arg(long, default_value_t = 1e-2)]
    tf: f64,
    /// Diffusivity.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Difference bump for the nd method.
    #[arg(long, default_value_t = 1e-9)]
    bump: f64,
    /// Lane width of the reverse pass.
    #[arg(long, default_value_t = 8)]
    lanes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VdpArgs {
    #[arg(long, default_value_t = 1e3)]
    mu: f64,
    #[arg(long, default_value_t = 0.5)]
    tf: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Method::Adjoint, Method::Nd])]
    method: Vec<Method>,
    #[arg(long, default_value = "cash-karp")]
    tableau: String,
    /// Sets both error weights unless --atol/--rtol override it.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    bump: f64,
    #[arg(long, default_value_t = 4)]
    lanes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GlvWpArgs {
    /// Community sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 40])]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Method::Adjoint, Method::Nd])]
    method: Vec<Method>,
    /// Tolerance sweep, sorted descending before use.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-4, 1e-7, 1e-10, 1e-13])]
    tol: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 1e-6)]
    bump: f64,
    /// Probability of an off-diagonal interaction.
    #[arg(long, default_value_t = 0.5)]
    connectance: f64,
    /// Interaction half-width; defaults to 0.1/sqrt(n).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    diagonal: f64,
    #[arg(long, default_value_t = 0.1)]
    growth: f64,
    #[arg(long, default_value_t = 0.1)]
    x0: f64,
    #[arg(long, default_value_t = 10.0)]
    tf: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GlvScalingArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 20, 40, 80])]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Method::Adjoint])]
    method: Vec<Method>,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1e-6)]
    bump: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Heat2d(args) => cmd_heat2d(args)?,
        Command::Vanderpol(args) => cmd_vanderpol(args)?,
        Command::GlvWp(args) => cmd_glv_wp(args)?,
        Command::GlvScaling(args) => cmd_glv_scaling(args)?,
        Command::Validate => return cmd_validate(),
    }
    Ok(ExitCode::SUCCESS)
}

fn tableau_by_name(name: &str) -> anyhow::Result<ButcherTableau<f64>> {
    ButcherTableau::by_name(name).with_context(|| format!("tableau '{name}'"))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn cmd_heat2d(args: Heat2dArgs) -> anyhow::Result<()> {
    let tableau = tableau_by_name(&args.tableau)?;
    let mut doc = CsvDoc::new(&[
        "np",
        "method",
        "forward_err_pct",
        "sens_err_pct",
        "status",
        "seconds",
    ]);
    doc.comment(format!(
        "heat2d tableau={} dt={} tf={} alpha={} bump={} lanes={}",
        tableau.name(),
        args.dt,
        args.tf,
        args.alpha,
        args.bump,
        args.lanes
    ));
    for &np in &args.np {
        let mut spec = heat::HeatSpec::new(np);
        spec.alpha = args.alpha;
        spec.tf = args.tf;
        spec.dt = args.dt;
        let rows = heat_run(&spec, &args.method, &tableau, args.bump, args.lanes)?;
        for r in rows {
            doc.row(vec![
                r.np.to_string(),
                r.method.to_string(),
                fmt(r.forward_err_pct),
                fmt(r.sens_err_pct),
                r.status,
                fmt(r.seconds),
            ]);
        }
    }
    doc.write(args.out.as_deref())?;
    Ok(())
}

fn controller_from(tol: f64, atol: Option<f64>, rtol: Option<f64>) -> StepController<f64> {
    let mut ctrl = StepController::from_tol(tol);
    if let Some(a) = atol {
        ctrl.eps_abs = a;
    }
    if let Some(r) = rtol {
        ctrl.eps_rel = r;
    }
    ctrl
}

fn cmd_vanderpol(args: VdpArgs) -> anyhow::Result<()> {
    let tableau = tableau_by_name(&args.tableau)?;
    let controller = controller_from(args.tol, args.atol, args.rtol);
    let rows = vanderpol_run(
        args.mu,
        args.tf,
        &args.method,
        &tableau,
        &controller,
        args.bump,
        args.lanes,
    )?;
    let mut doc = CsvDoc::new(&[
        "method", "x_tf", "v_tf", "dx_dmu", "dv_dmu", "accepted", "rejected", "seconds",
    ]);
    doc.comment(format!(
        "vanderpol mu={} tf={} tableau={} atol={} rtol={} bump={} lanes={}",
        args.mu,
        args.tf,
        tableau.name(),
        controller.eps_abs,
        controller.eps_rel,
        args.bump,
        args.lanes
    ));
    for r in rows {
        doc.row(vec![
            r.method.to_string(),
            fmt(r.x_tf),
            fmt(r.v_tf),
            fmt(r.dx_dmu),
            fmt(r.dv_dmu),
            r.accepted.to_string(),
            r.rejected.to_string(),
            fmt(r.seconds),
        ]);
    }
    doc.write(args.out.as_deref())?;
    Ok(())
}

fn glv_spec_from(n: usize, args: &GlvWpArgs) -> glv::GlvSpec {
    let mut spec = glv::GlvSpec::new(n, args.seed);
    spec.connectance = args.connectance;
    spec.sigma = args.sigma;
    spec.diagonal = args.diagonal;
    spec.growth = args.growth;
    spec.x0 = args.x0;
    spec.tf = args.tf;
    spec
}

fn cmd_glv_wp(args: GlvWpArgs) -> anyhow::Result<()> {
    let mut tols = args.tol.clone();
    tols.sort_by(|a, b| b.partial_cmp(a).expect("finite tolerances"));
    tols.dedup();

    let mut doc = CsvDoc::new(&[
        "method",
        "n",
        "tolerance",
        "error",
        "mean_ms",
        "std_ms",
        "accepted",
        "rejected",
        "status",
    ]);
    for &n in &args.n {
        let spec = glv_spec_from(n, &args);
        doc.comment(format!(
            "glv-wp n={} seed={} connectance={} sigma={} diagonal={} growth={} x0={} tf={} repeats={} bump={}",
            n,
            spec.seed,
            spec.connectance,
            spec.sigma(),
            spec.diagonal,
            spec.growth,
            spec.x0,
            spec.tf,
            args.repeats,
            args.bump
        ));
        let rows = wp_run(&spec, &args.method, &tols, args.repeats, args.bump)?;
        for r in rows {
            doc.row(vec![
                r.method.to_string(),
                r.n.to_string(),
                fmt(r.tolerance),
                fmt(r.error),
                fmt(r.mean_ms),
                fmt(r.std_ms),
                r.accepted.to_string(),
                r.rejected.to_string(),
                r.status,
            ]);
        }
    }
    doc.write(args.out.as_deref())?;
    Ok(())
}

fn cmd_glv_scaling(args: GlvScalingArgs) -> anyhow::Result<()> {
    let (rows, slopes) = scaling_run(
        &args.n,
        args.tol,
        &args.method,
        args.seed,
        args.repeats,
        args.bump,
    )?;
    let mut doc = CsvDoc::new(&["method", "n", "p", "n_plus_p", "mean_ms", "std_ms"]);
    doc.comment(format!(
        "glv-scaling tol={} seed={} repeats={} bump={}",
        args.tol, args.seed, args.repeats, args.bump
    ));
    for (method, slope) in &slopes {
        doc.comment(format!("slope method={method} value={slope}"));
    }
    for r in rows {
        doc.row(vec![
            r.method.to_string(),
            r.n.to_string(),
            r.p.to_string(),
            (r.n + r.p).to_string(),
            fmt(r.mean_ms),
            fmt(r.std_ms),
        ]);
    }
    doc.write(args.out.as_deref())?;
    Ok(())
}

fn cmd_validate() -> anyhow::Result<ExitCode> {
    let violations = validate_suite()?;
    if violations.is_empty() {
        println!("validate: all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        eprintln!("validate: {} check(s) failed", violations.len());
        Ok(ExitCode::FAILURE)
    }
}
