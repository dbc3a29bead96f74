//! Smoke tests against the compiled binary: exit codes, CSV shape, and the
//! cross-method checks the subcommands are expected to satisfy.

use std::path::Path;
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rkadjoint"))
}

fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("binary runs")
}

/// Data rows of a written CSV, comments and the header stripped.
fn data_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).expect("csv exists");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn header_line(path: &Path) -> String {
    let text = std::fs::read_to_string(path).expect("csv exists");
    text.lines()
        .find(|l| !l.starts_with('#'))
        .expect("header present")
        .to_string()
}

#[test]
fn validate_subcommand_exits_clean() {
    let out = run(&["validate"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("all checks passed"), "stdout: {stdout}");
}

#[test]
fn heat_table_lands_in_a_csv_with_the_advertised_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.csv");
    let out = run(&[
        "heat2d",
        "--np",
        "6",
        "--method",
        "adjoint,cfsa",
        "--tableau",
        "rk4",
        "--dt",
        "2e-4",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        header_line(&path),
        "np,method,forward_err_pct,sens_err_pct,status,seconds"
    );
    let rows = data_rows(&path);
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row[0], "6");
        assert_eq!(row[4], "ok");
        let sens: f64 = row[3].parse().unwrap();
        assert!(sens.is_finite() && sens < 10.0, "sens err {sens}");
    }
}

#[test]
fn vanderpol_methods_agree_on_the_damping_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vdp.csv");
    let out = run(&[
        "vanderpol",
        "--mu",
        "5",
        "--tf",
        "0.3",
        "--tol",
        "1e-8",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&path);
    assert_eq!(rows.len(), 2, "adjoint and nd rows");
    let dx: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let dv: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(
        (dx[0] - dx[1]).abs() <= 1e-3 * dx[0].abs().max(1.0),
        "dx/dmu split: {dx:?}"
    );
    assert!(
        (dv[0] - dv[1]).abs() <= 1e-3 * dv[0].abs().max(1.0),
        "dv/dmu split: {dv:?}"
    );
}

#[test]
fn work_precision_runs_are_deterministic_apart_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let out = run(&[
            "glv-wp",
            "--n",
            "5",
            "--method",
            "adjoint",
            "--tol",
            "1e-6,1e-9",
            "--seed",
            "3",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let rows_a = data_rows(&a);
    let rows_b = data_rows(&b);
    assert_eq!(rows_a.len(), rows_b.len());
    for (ra, rb) in rows_a.iter().zip(&rows_b) {
        // mean_ms and std_ms (columns 4 and 5) vary run to run.
        for col in [0usize, 1, 2, 3, 6, 7, 8] {
            assert_eq!(ra[col], rb[col], "column {col}");
        }
    }
}

#[test]
fn unknown_names_fail_with_a_nonzero_exit() {
    let out = run(&["heat2d", "--tableau", "nosuch"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nosuch"), "stderr: {stderr}");

    let out = run(&["vanderpol", "--method", "bogus"]);
    assert!(!out.status.success());
}
