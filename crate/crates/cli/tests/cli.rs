use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rakekit::table::{parse_table, read_records, DimDecl, Schema};
use rakekit_cli::bench::{run_ipf, run_newton, Instance};
use rakekit_cli::experiments::{run_experiment, uq_setup, ExperimentOptions};
use rakekit_cli::CliError;
use serde_json::Value;
use tempfile::TempDir;

const TABLE1: &str = "value,X1,X2,weights
1.0,1,1,1.0
2.0,1,2,1.0
3.0,2,1,1.0
NaN,2,2,0.0
4.0,1,0,inf
7.0,2,0,inf
5.0,0,1,10
";

fn rakekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rakekit")).args(args).output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, content: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, content).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    read_records(fs::File::open(p).unwrap()).unwrap()
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn table1_recovers_the_missing_cell() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let out = dir.path().join("raked.csv");
    let diag = dir.path().join("diag.json");
    let o = rakekit(&["solve", "--input", s(&input), "--dims", "X1,X2", "--out", s(&out), "--diag", s(&diag)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 7);
    let (rv, rec) = (col(&h, "raked_value"), col(&h, "recovered"));
    let v = |r: usize| rows[r][rv].parse::<f64>().unwrap();
    assert_eq!(rows[3][rec], "true");
    assert!(rows.iter().enumerate().all(|(i, r)| i == 3 || r[rec] == "false"));
    // constraints hold, and the missing cell closes the second row
    assert!((v(0) + v(1) - 4.0).abs() < 1e-8);
    assert!((v(2) + v(3) - 7.0).abs() < 1e-8);
    assert!((v(4) - 4.0).abs() < 1e-8 && (v(5) - 7.0).abs() < 1e-8);
    assert!((v(6) - (v(0) + v(2))).abs() < 1e-12);

    let d: Value = serde_json::from_str(&fs::read_to_string(&diag).unwrap()).unwrap();
    assert_eq!(d["path"], "reduced_dual_newton");
    assert_eq!(d["converged"], true);
    assert!(d["trace"].as_array().is_some_and(|t| !t.is_empty()));
}

#[test]
fn raked_output_parses_again() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let out = dir.path().join("raked.csv");
    assert!(rakekit(&["solve", "--input", s(&input), "--dims", "X1,X2", "--out", s(&out)]).status.success());
    let (h, rows) = read_csv(&out);
    let schema = Schema::new(vec![DimDecl::new("X1").sentinel("0"), DimDecl::new("X2").sentinel("0")])
        .value_col("raked_value")
        .weight_col("weights");
    let data = parse_table(&h, &rows, &schema).unwrap();
    assert_eq!(data.rows.len(), 7);
}

#[test]
fn consistent_input_is_left_alone() {
    let dir = TempDir::new().unwrap();
    let input = write(
        &dir,
        "ok.csv",
        "value,a,b,weights\n1,1,1,1\n2,1,2,1\n3,2,1,1\n4,2,2,1\n3,1,0,inf\n7,2,0,inf\n4,0,1,inf\n6,0,2,inf\n",
    );
    let out = dir.path().join("raked.csv");
    let diag = dir.path().join("diag.json");
    let o = rakekit(&["solve", "--input", s(&input), "--dims", "a,b", "--out", s(&out), "--diag", s(&diag)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out);
    let (v, rv) = (col(&h, "value"), col(&h, "raked_value"));
    for r in &rows {
        let (a, b): (f64, f64) = (r[v].parse().unwrap(), r[rv].parse().unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let d: Value = serde_json::from_str(&fs::read_to_string(&diag).unwrap()).unwrap();
    assert!(d["outer_iterations"].as_u64().unwrap() <= 1);
}

#[test]
fn contradictory_margins_exit_1() {
    let dir = TempDir::new().unwrap();
    let input = write(
        &dir,
        "bad.csv",
        "value,a,b,weights\n1,1,1,1\n2,1,2,1\n3,2,1,1\n4,2,2,1\n3,1,0,inf\n7,2,0,inf\n4,0,1,inf\n7,0,2,inf\n",
    );
    let out = dir.path().join("raked.csv");
    let o = rakekit(&["solve", "--input", s(&input), "--dims", "a,b", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("implied by constraints") && err.contains("its margin is 7"), "{err}");
}

#[test]
fn input_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let out = dir.path().join("raked.csv");
    let o = rakekit(&["solve", "--input", s(&input), "--dims", "X1,X3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = rakekit(&["solve", "--input", "/nonexistent.csv", "--dims", "X1,X2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = rakekit(&["solve", "--input", s(&input), "--dims", "X1,X2", "--loss", "logistic", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = rakekit(&["experiment", "nope", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss_comparison"));
}

#[test]
fn non_convergence_exits_2_with_partial_output() {
    let dir = TempDir::new().unwrap();
    let input = write(
        &dir,
        "hard.csv",
        "value,a,b,weights\n1,1,1,1\n2,1,2,1\n3,2,1,1\n4,2,2,1\n30,1,0,inf\n70,2,0,inf\n40,0,1,inf\n60,0,2,inf\n",
    );
    let out = dir.path().join("raked.csv");
    let diag = dir.path().join("diag.json");
    let o = rakekit(&[
        "solve",
        "--input",
        s(&input),
        "--dims",
        "a,b",
        "--force-path",
        "newton_dual",
        "--max-outer",
        "1",
        "--out",
        s(&out),
        "--diag",
        s(&diag),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.exists());
    let d: Value = serde_json::from_str(&fs::read_to_string(&diag).unwrap()).unwrap();
    assert_eq!(d["converged"], false);
}

#[test]
fn logistic_bounds_from_scalars_and_columns() {
    let dir = TempDir::new().unwrap();
    let input = write(
        &dir,
        "b.csv",
        "value,a,b,weights,lo,hi\n1,1,1,1,0.5,3\n2,1,2,1,0.5,3\n3,2,1,1,0.5,4\n2,2,2,1,0.5,4\n4,1,0,inf,,\n5,2,0,inf,,\n4,0,1,inf,,\n5,0,2,inf,,\n",
    );
    for (lo, hi) in [("0.5", "4"), ("lo", "hi")] {
        let out = dir.path().join(format!("raked_{lo}.csv"));
        let o = rakekit(&[
            "solve",
            "--input",
            s(&input),
            "--dims",
            "a,b",
            "--loss",
            "logistic",
            "--lower",
            lo,
            "--upper",
            hi,
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let (h, rows) = read_csv(&out);
        let rv = col(&h, "raked_value");
        for r in &rows[..4] {
            let v: f64 = r[rv].parse().unwrap();
            assert!((0.5..=4.0).contains(&v));
        }
    }
}

/// The 3 x 5 setup as a CSV with a `var` column; margins carry no variance.
fn uq_csv(dir: &TempDir, variance_scale: f64) -> PathBuf {
    let (y, s_m, cov) = uq_setup(0);
    let mut text = String::from("value,r,c,weights,var\n");
    for i in 0..3 {
        for j in 0..5 {
            let k = i * 5 + j;
            text += &format!("{},{},{},1,{}\n", y[k], i + 1, j + 1, variance_scale * cov[(k, k)]);
        }
    }
    for (i, v) in s_m[..3].iter().enumerate() {
        text += &format!("{v},{},0,inf,0\n", i + 1);
    }
    for j in 0..5 {
        text += &format!("{},0,{},inf,0\n", s_m[3 + j], j + 1);
    }
    write(dir, "uq.csv", &text)
}

fn sd_columns(out: &Path) -> Vec<(f64, f64)> {
    let (h, rows) = read_csv(out);
    let (i, o) = (col(&h, "input_sd"), col(&h, "sd"));
    rows[..15].iter().map(|r| (r[i].parse().unwrap(), r[o].parse().unwrap())).collect()
}

#[test]
fn delta_mode_shrinks_total_variance() {
    let dir = TempDir::new().unwrap();
    let input = uq_csv(&dir, 1.0);
    let out = dir.path().join("raked.csv");
    let o = rakekit(&[
        "uq",
        "--input",
        s(&input),
        "--dims",
        "r,c",
        "--variance-col",
        "var",
        "--uq",
        "delta",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sds = sd_columns(&out);
    let before: f64 = sds.iter().map(|(i, _)| i * i).sum();
    let after: f64 = sds.iter().map(|(_, o)| o * o).sum();
    assert!(after < before, "{after} >= {before}");
    let (h, rows) = read_csv(&dir.path().join("raked_sensitivity.csv"));
    assert_eq!(rows.len(), 15);
    assert_eq!(h[0], "target");
    assert_eq!(h[1], "y[1:1]");
    let (h, rows) = read_csv(&dir.path().join("raked_sigma.csv"));
    assert_eq!((h.len(), rows.len()), (16, 15));
}

#[test]
fn draws_with_zero_covariance_give_zero_sd() {
    let dir = TempDir::new().unwrap();
    let input = uq_csv(&dir, 0.0);
    let out = dir.path().join("raked.csv");
    let o = rakekit(&[
        "uq",
        "--input",
        s(&input),
        "--dims",
        "r,c",
        "--variance-col",
        "var",
        "--uq",
        "draws",
        "--draws",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sd_columns(&out).iter().all(|&(_, sd)| sd == 0.0));
    let (_, draws) = read_csv(&dir.path().join("raked_draws.csv"));
    assert_eq!(draws.len(), 2);
}

#[test]
fn delta_and_draws_agree_for_moderate_noise() {
    let dir = TempDir::new().unwrap();
    let input = uq_csv(&dir, 0.01);
    let delta = dir.path().join("delta.csv");
    let draws = dir.path().join("draws.csv");
    let base = ["--input", s(&input), "--dims", "r,c", "--variance-col", "var"];
    let o = rakekit(&[&["uq"][..], &base, &["--uq", "delta", "--out", s(&delta)]].concat());
    assert!(o.status.success());
    let o = rakekit(
        &[&["uq"][..], &base, &["--uq", "draws", "--draws", "100000", "--seed", "1", "--out", s(&draws)]].concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = sd_columns(&delta);
    let b = sd_columns(&draws);
    let close = a.iter().zip(&b).filter(|((_, x), (_, y))| (x - y).abs() <= 0.05 * x).count();
    assert!(close * 10 >= 9 * a.len(), "{close} of {} within 5%", a.len());
}

#[test]
fn covariance_matrix_input_matches_variance_column() {
    let dir = TempDir::new().unwrap();
    let input = uq_csv(&dir, 1.0);
    let (_, _, cov) = uq_setup(0);
    // 15 cells then 8 margins, in file order
    let mut text: String = (0..23).map(|i| format!("c{i}")).collect::<Vec<_>>().join(",") + "\n";
    for a in 0..23 {
        let row: Vec<String> =
            (0..23).map(|b| if a == b && a < 15 { cov[(a, a)].to_string() } else { "0".into() }).collect();
        text += &(row.join(",") + "\n");
    }
    let matrix = write(&dir, "cov.csv", &text);
    let (x, y) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    assert!(rakekit(&["uq", "--input", s(&input), "--dims", "r,c", "--variance-col", "var", "--out", s(&x)])
        .status
        .success());
    let o = rakekit(&["uq", "--input", s(&input), "--dims", "r,c", "--cov", s(&matrix), "--out", s(&y)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap());

    let short = write(&dir, "short.csv", "a,b\n1,0\n0,1\n");
    let o = rakekit(&["uq", "--input", s(&input), "--dims", "r,c", "--cov", s(&short), "--out", s(&y)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn uq_without_covariance_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let out = dir.path().join("raked.csv");
    let o = rakekit(&["uq", "--input", s(&input), "--dims", "X1,X2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn rank_one_bench_instance_converges_immediately() {
    let (r, c) = ([1.0, 2.0, 3.0], [0.5, 1.5, 2.0, 1.0]);
    let y: Vec<f64> = r.iter().flat_map(|a| c.iter().map(move |b| a * b)).collect();
    let (tr, tc): (f64, f64) = (r.iter().sum(), c.iter().sum());
    let inst = Instance {
        rows: 3,
        cols: 4,
        y,
        s_r: r.iter().map(|a| a * tc).collect(),
        s_c: c.iter().map(|b| b * tr).collect(),
    };
    let opts = rakekit::solver::SolverOptions::default();
    for run in [run_ipf(&inst, &opts), run_newton(&inst, &opts)] {
        assert!(run.error.is_none(), "{}: {:?}", run.solver, run.error);
        assert!(run.trace.last().unwrap().iteration <= 2, "{}", run.solver);
    }
}

#[test]
fn bench_writes_long_format() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.csv");
    let o = rakekit(&["bench", "--seeds", "2", "--rows", "8", "--cols", "6", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out);
    assert_eq!(h, ["seed", "solver", "iteration", "matvecs", "dual_objective", "dual_gap", "max_violation"]);
    let solvers = col(&h, "solver");
    assert!(rows.iter().any(|r| r[solvers] == "ipf") && rows.iter().any(|r| r[solvers] == "newton"));
    let gaps: Vec<f64> = rows.iter().map(|r| r[col(&h, "dual_gap")].parse().unwrap()).collect();
    assert!(gaps.iter().all(|g| *g >= 0.0));
}

#[test]
fn experiments_are_deterministic_and_match_claims() {
    let opts = ExperimentOptions { uq_draws: vec![100, 1000], ..ExperimentOptions::default() };
    for name in ["missing_data", "weights_simulation", "uq_comparison"] {
        let a = run_experiment(name, &opts).unwrap();
        let b = run_experiment(name, &opts).unwrap();
        for ((_, fa), (_, fb)) in a.iter().zip(&b) {
            assert_eq!(fa.to_csv_string(), fb.to_csv_string(), "{name}");
        }
    }
    let other_seed = ExperimentOptions { seed: 1, ..opts.clone() };
    let a = run_experiment("loss_comparison", &opts).unwrap();
    let b = run_experiment("loss_comparison", &other_seed).unwrap();
    assert_ne!(a[0].1.to_csv_string(), b[0].1.to_csv_string());

    // weighted raking leaves the well-measured cause closer to where it was
    let w = run_experiment("weights_simulation", &opts).unwrap();
    let summary = &w[1].1;
    let (su, sw) = (summary.column("mean_shift_unweighted").unwrap(), summary.column("mean_shift_weighted").unwrap());
    let cause1 = &summary.rows[0];
    assert!(cause1[sw].parse::<f64>().unwrap() < cause1[su].parse::<f64>().unwrap());
}

#[test]
fn unknown_experiment_lists_names() {
    match run_experiment("nope", &ExperimentOptions::default()) {
        Err(e @ CliError::UnknownExperiment(_)) => {
            assert_eq!(e.exit_code(), 1);
            assert!(e.to_string().contains("uq_comparison"));
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
}
