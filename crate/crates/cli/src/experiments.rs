//! Synthetic scenarios, each emitted as tidy CSV.
//!
//! Every random quantity is drawn from `ChaCha8Rng::seed_from_u64(seed)`
//! with one stream per replicate, so outputs depend only on the options.

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use nalgebra::DMatrix;
use rakekit::linop::{two_way_margins, AggOperator};
use rakekit::loss::LossKind;
use rakekit::problem::{Problem, ProblemSpec};
use rakekit::solver::{solve, Solution, SolverOptions};
use rakekit::uq::{
    chi2_closed_form_covariance, delta_covariance, monte_carlo_covariance, n_inputs, DrawPolicy, InputCovariance,
    McOptions,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::frame::Frame;
use crate::row;
use crate::CliError;

pub const NAMES: [&str; 5] =
    ["loss_comparison", "weights_simulation", "aggregate_observations", "missing_data", "uq_comparison"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub seed: u64,
    /// Replicates of the loss comparison.
    pub replicates: usize,
    /// Simulations of the weighting study.
    pub simulations: usize,
    /// Multiply observations by `U[1.0, 1.1]` instead of `U[10, 11]` in
    /// the aggregate-observation scenario.
    pub gentle_noise: bool,
    /// Weight given to mean-imputed cells in the missing-data scenario.
    pub fill_weight: f64,
    /// Monte Carlo sample sizes for the UQ comparison; the largest also
    /// gives the reported standard deviations.
    pub uq_draws: Vec<usize>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            seed: 0,
            replicates: 20,
            simulations: 500,
            gentle_noise: false,
            fill_weight: 1e-3,
            uq_draws: vec![100, 1_000, 10_000, 100_000],
        }
    }
}

/// Named output tables of one experiment.
pub type Outputs = Vec<(String, Frame)>;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let u = Uniform::new(lo, hi).expect("finite interval");
    (0..n).map(|_| u.sample(rng)).collect()
}

fn options() -> SolverOptions {
    SolverOptions { grad_tol: 1e-12, ..SolverOptions::default() }
}

pub fn run_experiment(name: &str, opts: &ExperimentOptions) -> Result<Outputs, CliError> {
    match name {
        "loss_comparison" => loss_comparison(opts),
        "weights_simulation" => weights_simulation(opts),
        "aggregate_observations" => aggregate_observations(opts),
        "missing_data" => missing_data(opts),
        "uq_comparison" => uq_comparison(opts),
        other => Err(CliError::UnknownExperiment(other.to_string())),
    }
}

/// Run one experiment and write `<table>.csv` files into `dir`.
pub fn cmd_experiment(name: &str, opts: &ExperimentOptions, dir: &FsPath) -> Result<Vec<PathBuf>, CliError> {
    let outputs = run_experiment(name, opts)?;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut paths = Vec::with_capacity(outputs.len());
    for (table, frame) in outputs {
        let path = dir.join(format!("{table}.csv"));
        frame.write_path(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

fn summarize<I: Iterator<Item = f64> + Clone>(values: I) -> (f64, f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (mean, lo, hi)
}

/// 4 x 5 table from `U[2, 4]`, each row summing to 5 and each column to 4,
/// weights `1 / y^2`, raked under every loss.
fn loss_comparison(opts: &ExperimentOptions) -> Result<Outputs, CliError> {
    let (m, n) = (4, 5);
    let mut s = vec![5.0; m];
    s.extend(vec![4.0; n]);
    let mut cells = Frame::new(["replicate", "loss", "row", "col", "observed", "raked"]);
    let mut raked_by_loss: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let kinds = [LossKind::Chi2, LossKind::Entropic, LossKind::Logistic];
    for rep in 0..opts.replicates {
        let y = uniform(&mut rng(opts.seed, rep as u64), 2.0, 4.0, m * n);
        let w: Vec<f64> = y.iter().map(|v| 1.0 / (v * v)).collect();
        for (k, kind) in kinds.into_iter().enumerate() {
            let mut spec = ProblemSpec::new(kind, y.clone(), two_way_margins(m, n), s.clone())
                .weights(w.clone())
                .shape(vec![m, n]);
            if kind == LossKind::Logistic {
                spec = spec.bounds(vec![0.5; m * n], vec![4.0; m * n]);
            }
            let sol = solve(&spec.compile()?, &options())?;
            for (c, (&obs, &b)) in y.iter().zip(&sol.beta).enumerate() {
                cells.push(row![rep, kind.name(), c / n + 1, c % n + 1, obs, b]);
            }
            raked_by_loss[k].extend(&sol.beta);
        }
    }
    let mut summary = Frame::new(["loss", "cells", "negative", "below_0.5", "min_raked", "max_raked"]);
    for (kind, raked) in kinds.iter().zip(&raked_by_loss) {
        let (_, lo, hi) = summarize(raked.iter().copied());
        let neg = raked.iter().filter(|&&v| v < 0.0).count();
        let low = raked.iter().filter(|&&v| v < 0.5).count();
        summary.push(row![kind.name(), raked.len(), neg, low, lo, hi]);
    }
    Ok(vec![("loss_comparison".into(), cells), ("loss_comparison_summary".into(), summary)])
}

const TRUE_RATE: f64 = 0.1;

/// Rate and binomial plug-in variance from ten binomial observations.
fn observed_rate(rng: &mut ChaCha8Rng, biased: bool) -> (f64, f64) {
    let sizes = Uniform::new_inclusive(100u64, 200).expect("valid range");
    let logit = (TRUE_RATE / (1.0 - TRUE_RATE)).ln();
    let (mut deaths, mut total) = (0u64, 0u64);
    for _ in 0..10 {
        let n = sizes.sample(rng);
        let p = if biased {
            let z: f64 = StandardNormal.sample(rng);
            1.0 / (1.0 + (-(logit + 0.5 * z)).exp())
        } else {
            TRUE_RATE
        };
        deaths += Binomial::new(n, p).expect("valid probability").sample(rng);
        total += n;
    }
    let rate = deaths as f64 / total as f64;
    (rate, rate * (1.0 - rate) / total as f64)
}

/// Observed rate, its variance, unweighted and weighted raked rate.
type CauseResult = (f64, f64, f64, f64);

/// Two causes raked to an all-cause rate of 0.2, with and without
/// inverse-variance weights.
fn weights_simulation(opts: &ExperimentOptions) -> Result<Outputs, CliError> {
    let margin = 2.0 * TRUE_RATE;
    let sims: Vec<Result<[CauseResult; 2], CliError>> = (0..opts.simulations)
        .into_par_iter()
        .map(|sim| {
            let mut r = rng(opts.seed, sim as u64);
            let (r1, v1) = observed_rate(&mut r, false);
            let (r2, v2) = observed_rate(&mut r, true);
            let a = AggOperator::new(vec![vec![0, 1]], 2).expect("valid");
            let base = ProblemSpec::new(LossKind::Entropic, vec![r1, r2], a, vec![margin]);
            let plain = solve(&base.clone().compile()?, &options())?;
            let weighted = solve(&base.weights(vec![1.0 / v1, 1.0 / v2]).compile()?, &options())?;
            Ok([(r1, v1, plain.beta[0], weighted.beta[0]), (r2, v2, plain.beta[1], weighted.beta[1])])
        })
        .collect();
    let mut cells =
        Frame::new(["simulation", "cause", "truth", "observed", "variance", "raked_unweighted", "raked_weighted"]);
    let mut per_cause: [Vec<(f64, f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for (sim, res) in sims.into_iter().enumerate() {
        for (c, (obs, var, plain, weighted)) in res?.into_iter().enumerate() {
            cells.push(row![sim, c + 1, TRUE_RATE, obs, var, plain, weighted]);
            per_cause[c].push((obs, plain, weighted));
        }
    }
    let mut summary = Frame::new([
        "cause",
        "mean_observed",
        "mean_unweighted",
        "mean_weighted",
        "mae_observed",
        "mae_unweighted",
        "mae_weighted",
        "mean_shift_unweighted",
        "mean_shift_weighted",
    ]);
    for (c, v) in per_cause.iter().enumerate() {
        let mean = |f: &dyn Fn(&(f64, f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / v.len().max(1) as f64;
        summary.push(row![
            c + 1,
            mean(&|t| t.0),
            mean(&|t| t.1),
            mean(&|t| t.2),
            mean(&|t| (t.0 - TRUE_RATE).abs()),
            mean(&|t| (t.1 - TRUE_RATE).abs()),
            mean(&|t| (t.2 - TRUE_RATE).abs()),
            mean(&|t| (t.1 - t.0).abs()),
            mean(&|t| (t.2 - t.0).abs()),
        ]);
    }
    Ok(vec![("weights_simulation".into(), cells), ("weights_simulation_summary".into(), summary)])
}

const SHAPE3: [usize; 3] = [3, 4, 5];

fn idx3(i: usize, j: usize, k: usize) -> usize {
    (i * SHAPE3[1] + j) * SHAPE3[2] + k
}

fn coords3(c: usize) -> (usize, usize, usize) {
    (c / 20, (c / 5) % 4, c % 5)
}

/// Sums over `i` per `(j, k)`, over `j` per `(i, k)` and over `k` per
/// `(i, j)`.
fn two_way_sums_3d() -> Vec<Vec<usize>> {
    let [a, b, c] = SHAPE3;
    let mut rows = Vec::new();
    for j in 0..b {
        for k in 0..c {
            rows.push((0..a).map(|i| idx3(i, j, k)).collect());
        }
    }
    for i in 0..a {
        for k in 0..c {
            rows.push((0..b).map(|j| idx3(i, j, k)).collect());
        }
    }
    for i in 0..a {
        for j in 0..b {
            rows.push((0..c).map(|k| idx3(i, j, k)).collect());
        }
    }
    rows
}

fn sum_rows(rows: &[Vec<usize>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().map(|&c| x[c]).sum()).collect()
}

/// A 3 x 4 x 5 table whose 47 two-way margins enter as weighted
/// aggregate observations.
fn aggregate_observations(opts: &ExperimentOptions) -> Result<Outputs, CliError> {
    let p = 60;
    let mut r = rng(opts.seed, 0);
    let truth = uniform(&mut r, 0.0, 10.0, p);
    let (lo, hi) = if opts.gentle_noise { (1.0, 1.1) } else { (10.0, 11.0) };
    let noise = uniform(&mut r, lo, hi, p);
    let y: Vec<f64> = truth.iter().zip(&noise).map(|(t, e)| t * e).collect();
    let rows = two_way_sums_3d();
    let margins = sum_rows(&rows, &truth);
    let b = AggOperator::new(rows.clone(), p).expect("indices in range");

    let mut cells = Frame::new([
        "margin_weight",
        "i",
        "j",
        "k",
        "truth",
        "observed",
        "raked",
        "rel_error_observed",
        "rel_error_raked",
    ]);
    let mut summary = Frame::new([
        "margin_weight",
        "mean_rel_error_observed",
        "mean_rel_error_raked",
        "max_rel_error_raked",
        "mean_rel_error_raked_margins",
    ]);
    for wm in [1.0, 2.0, 10.0] {
        let problem = ProblemSpec::new(LossKind::Entropic, y.clone(), AggOperator::empty(p), Vec::new())
            .shape(SHAPE3.to_vec())
            .aggregate_observations(b.clone(), margins.clone(), vec![wm; rows.len()])
            .compile()?;
        let sol = solve(&problem, &options())?;
        let rel = |v: f64, t: f64| (v - t).abs() / t;
        let (mut e_obs, mut e_raked) = (Vec::new(), Vec::new());
        for c in 0..p {
            let (i, j, k) = coords3(c);
            let (eo, er) = (rel(y[c], truth[c]), rel(sol.beta[c], truth[c]));
            cells.push(row![wm, i + 1, j + 1, k + 1, truth[c], y[c], sol.beta[c], eo, er]);
            e_obs.push(eo);
            e_raked.push(er);
        }
        let raked_margins = sum_rows(&rows, &sol.beta);
        let (m_err, _, _) = summarize(raked_margins.iter().zip(&margins).map(|(v, t)| rel(*v, *t)));
        let (mo, _, _) = summarize(e_obs.iter().copied());
        let (mr, _, xr) = summarize(e_raked.iter().copied());
        summary.push(row![wm, mo, mr, xr, m_err]);
    }
    Ok(vec![("aggregate_observations".into(), cells), ("aggregate_observations_summary".into(), summary)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Treatment {
    Baseline,
    Zeros,
    MissingNoAggregate,
    MissingWithAggregate,
    MeanFill,
}

impl Treatment {
    const ALL: [Treatment; 5] = [
        Treatment::Baseline,
        Treatment::Zeros,
        Treatment::MissingNoAggregate,
        Treatment::MissingWithAggregate,
        Treatment::MeanFill,
    ];

    fn name(self) -> &'static str {
        match self {
            Treatment::Baseline => "baseline",
            Treatment::Zeros => "zeros",
            Treatment::MissingNoAggregate => "missing_no_aggregate",
            Treatment::MissingWithAggregate => "missing_with_aggregate",
            Treatment::MeanFill => "mean_fill",
        }
    }
}

/// A 3 x 4 x 5 table with 3 constraints and 36 aggregate observations;
/// the fiber `(i, 0, 0)` is then removed and handled four ways.
fn missing_data(opts: &ExperimentOptions) -> Result<Outputs, CliError> {
    let [a, b, c] = SHAPE3;
    let p = a * b * c;
    let mut r = rng(opts.seed, 0);
    let truth = uniform(&mut r, 2.0, 10.0, p);
    let y: Vec<f64> = truth.iter().zip(uniform(&mut r, 0.9, 1.1, p)).map(|(t, e)| t * e).collect();

    let constraints: Vec<Vec<usize>> =
        (0..a).map(|i| (0..b).flat_map(|j| (0..c).map(move |k| idx3(i, j, k))).collect()).collect();
    let s = sum_rows(&constraints, &truth);
    let mut agg: Vec<Vec<usize>> = Vec::new();
    for j in 0..b {
        for k in 0..c {
            agg.push((0..a).map(|i| idx3(i, j, k)).collect());
        }
    }
    for i in 0..a {
        for j in 0..b {
            agg.push((0..c).map(|k| idx3(i, j, k)).collect());
        }
    }
    for j in 0..b {
        agg.push((0..a).flat_map(|i| (0..c).map(move |k| idx3(i, j, k))).collect());
    }
    let s_b: Vec<f64> =
        sum_rows(&agg, &truth).into_iter().zip(uniform(&mut r, 0.95, 1.05, agg.len())).map(|(t, e)| t * e).collect();
    let missing: Vec<usize> = (0..a).map(|i| idx3(i, 0, 0)).collect();
    // the sum over i at (0, 0) covers exactly the missing cells
    let fiber_agg = 0;

    let a_op = AggOperator::new(constraints, p).expect("indices in range");
    let mut cells = Frame::new(["scenario", "i", "j", "k", "missing", "truth", "observed", "raked"]);
    let mut results: Vec<(Treatment, Solution)> = Vec::new();
    for t in Treatment::ALL {
        let keep_agg: Vec<usize> =
            (0..agg.len()).filter(|&q| t != Treatment::MissingNoAggregate || q != fiber_agg).collect();
        let b_op = AggOperator::new(keep_agg.iter().map(|&q| agg[q].clone()).collect(), p).expect("valid");
        let sb: Vec<f64> = keep_agg.iter().map(|&q| s_b[q]).collect();
        let mut yt = y.clone();
        let mut w = vec![1.0; p];
        let observed: Vec<usize> = match t {
            Treatment::MissingNoAggregate | Treatment::MissingWithAggregate => {
                (0..p).filter(|cell| !missing.contains(cell)).collect()
            }
            _ => (0..p).collect(),
        };
        match t {
            Treatment::Zeros => missing.iter().for_each(|&m| yt[m] = 0.0),
            Treatment::MeanFill => {
                let present: Vec<f64> = (0..p).filter(|cell| !missing.contains(cell)).map(|cell| y[cell]).collect();
                let fill = present.iter().sum::<f64>() / present.len() as f64;
                for &m in &missing {
                    yt[m] = fill;
                    w[m] = opts.fill_weight;
                }
            }
            _ => {}
        }
        let y_obs: Vec<f64> = observed.iter().map(|&cell| yt[cell]).collect();
        let w_obs: Vec<f64> = observed.iter().map(|&cell| w[cell]).collect();
        let n_b = sb.len();
        let problem = ProblemSpec::new(LossKind::Entropic, y_obs, a_op.clone(), s.clone())
            .weights(w_obs)
            .shape(SHAPE3.to_vec())
            .observed(observed.clone(), p)
            .aggregate_observations(b_op, sb, vec![1.0; n_b])
            .compile()?;
        let sol = solve(&problem, &options())?;
        for cell in 0..p {
            let (i, j, k) = coords3(cell);
            let is_missing = t != Treatment::Baseline && missing.contains(&cell);
            let obs = if observed.binary_search(&cell).is_ok() { yt[cell] } else { f64::NAN };
            let flag = if is_missing { "true" } else { "false" };
            cells.push(row![t.name(), i + 1, j + 1, k + 1, flag, truth[cell], obs, sol.beta[cell]]);
        }
        results.push((t, sol));
    }
    let base = &results[0].1.beta;
    let mut summary = Frame::new([
        "scenario",
        "max_rel_diff_observed",
        "mean_rel_diff_observed",
        "max_rel_diff_missing",
        "min_missing_raked",
    ]);
    for (t, sol) in &results {
        let rel = |cell: usize| (sol.beta[cell] - base[cell]).abs() / base[cell].abs();
        let (mo, _, xo) = summarize((0..p).filter(|cell| !missing.contains(cell)).map(rel));
        let (_, _, xm) = summarize(missing.iter().map(|&cell| rel(cell)));
        let (_, lo, _) = summarize(missing.iter().map(|&cell| sol.beta[cell]));
        summary.push(row![t.name(), xo, mo, xm, lo]);
    }
    Ok(vec![("missing_data".into(), cells), ("missing_data_summary".into(), summary)])
}

/// Row and column sizes of the UQ table, and the cell whose influence is
/// traced (third row, fourth column).
const UQ_SHAPE: (usize, usize) = (3, 5);
pub const UQ_TRACED_CELL: usize = 2 * 5 + 3;

/// The 3 x 5 UQ setup: observations, margins and the input covariance.
pub fn uq_setup(seed: u64) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = UQ_SHAPE;
    let p = m * n;
    let mut r = rng(seed, 0);
    let beta0 = uniform(&mut r, 2.0, 3.0, p);
    let s = two_way_margins(m, n).apply(&beta0).expect("sizes match");
    let sd = 0.1f64.sqrt();
    let y0: Vec<f64> = beta0
        .iter()
        .map(|b| {
            let z: f64 = StandardNormal.sample(&mut r);
            b + sd * z
        })
        .collect();
    let mut cov = DMatrix::from_element(p, p, 0.01);
    for k in 0..p {
        cov[(k, k)] = 0.1 * (k + 1) as f64;
    }
    (y0, s, cov)
}

/// The UQ setup as a problem, with the cell covariance padded by zeros for
/// the exact margins.
pub fn uq_problem(seed: u64, kind: LossKind) -> Result<(Problem, InputCovariance), CliError> {
    let (m, n) = UQ_SHAPE;
    let (y0, s, cov_y) = uq_setup(seed);
    let problem = ProblemSpec::new(kind, y0, two_way_margins(m, n), s).shape(vec![m, n]).compile()?;
    let k = n_inputs(&problem);
    let mut cov = DMatrix::zeros(k, k);
    cov.view_mut((0, 0), (m * n, m * n)).copy_from(&cov_y);
    Ok((problem, InputCovariance::Full(cov)))
}

fn uq_comparison(opts: &ExperimentOptions) -> Result<Outputs, CliError> {
    let (m, n) = UQ_SHAPE;
    let p = m * n;
    let mut cells = Frame::new([
        "loss",
        "row",
        "col",
        "observed",
        "input_sd",
        "raked",
        "sd_delta",
        "sd_closed_form",
        "sd_mc",
        "mc_mean",
    ]);
    let mut sens = Frame::new(["loss", "row", "col", "d_raked_d_traced", "d_traced_d_observed"]);
    let mut conv =
        Frame::new(["loss", "draws", "accepted", "rejected", "row", "col", "raked_at_mean", "mc_mean", "mc_sd"]);
    for kind in [LossKind::Chi2, LossKind::Entropic] {
        let (problem, cov) = uq_problem(opts.seed, kind)?;
        let sol = solve(&problem, &SolverOptions { grad_tol: 1e-13, ..SolverOptions::default() })?;
        let delta = delta_covariance(&problem, &sol, &cov)?;
        let closed = match kind {
            LossKind::Chi2 => Some(chi2_closed_form_covariance(&problem, &sol, &cov)?),
            _ => None,
        };
        let mut largest = None;
        for &draws in &opts.uq_draws {
            let mc = monte_carlo_covariance(
                &problem,
                &cov,
                &McOptions { draws, seed: opts.seed, policy: DrawPolicy::Reject, ..McOptions::default() },
            )?;
            for c in 0..p {
                let sd = mc.sigma_beta[(c, c)].max(0.0).sqrt();
                conv.push(row![
                    kind.name(),
                    draws,
                    mc.accepted,
                    mc.rejected,
                    c / n + 1,
                    c % n + 1,
                    sol.beta[c],
                    mc.mean[c],
                    sd
                ]);
            }
            largest = Some(mc);
        }
        let cov_d = cov.to_dense();
        for c in 0..p {
            let sd = |s: &DMatrix<f64>| s[(c, c)].max(0.0).sqrt();
            let sd_closed = closed.as_ref().map_or(f64::NAN, |r| sd(&r.sigma_beta));
            let (sd_mc, mean_mc) = largest.as_ref().map_or((f64::NAN, f64::NAN), |r| (sd(&r.sigma_beta), r.mean[c]));
            cells.push(row![
                kind.name(),
                c / n + 1,
                c % n + 1,
                problem.y()[c],
                cov_d[(c, c)].sqrt(),
                sol.beta[c],
                sd(&delta.sigma_beta),
                sd_closed,
                sd_mc,
                mean_mc
            ]);
            sens.push(row![
                kind.name(),
                c / n + 1,
                c % n + 1,
                delta.sensitivity[(c, UQ_TRACED_CELL)],
                delta.sensitivity[(UQ_TRACED_CELL, c)]
            ]);
        }
    }
    Ok(vec![("uq_comparison".into(), cells), ("uq_sensitivity".into(), sens), ("uq_convergence".into(), conv)])
}
