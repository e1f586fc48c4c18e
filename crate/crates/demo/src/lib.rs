//! Browser front end for rakekit.
//!
//! Each export takes plain arguments and returns a JSON string; errors come
//! back as a JS string. The same functions are callable natively, which is
//! how the tests exercise them.

use rakekit::linop::AggOperator;
use rakekit::loss::LossKind;
use rakekit::problem::{Problem, ProblemSpec};
use rakekit::solver::{solve, solve_ipf_2d, solve_newton_dual, Path, Solution, SolverError, SolverOptions, TwoWay};
use rakekit::table::{build_problem, read_csv, DimDecl, LossConfig, RakingData, Schema, TableError};
use rakekit::uq::{delta_covariance, n_inputs, InputCovariance, UqError};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;
use wasm_bindgen::prelude::*;

/// Largest table the race will build, per side.
pub const MAX_RACE_SIDE: usize = 300;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Serialize)]
pub struct CellOut {
    pub label: String,
    /// Observed value; `null` for a missing cell.
    pub input: Option<f64>,
    pub raked: f64,
}

#[derive(Debug, Serialize)]
pub struct RakeReport {
    pub shape: Vec<usize>,
    pub cells: Vec<CellOut>,
    pub path: Path,
    pub iterations: usize,
    pub max_violation: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct TracePoint {
    pub matvecs: u64,
    pub max_violation: f64,
}

#[derive(Debug, Serialize)]
pub struct RaceReport {
    pub ipf: Vec<TracePoint>,
    pub newton: Vec<TracePoint>,
}

#[derive(Debug, Serialize)]
pub struct SensitivityReport {
    pub shape: Vec<usize>,
    pub labels: Vec<String>,
    pub target: usize,
    pub raked: Vec<f64>,
    pub input_sd: f64,
    /// Standard deviation of each raked cell.
    pub sd: Vec<f64>,
    /// `d beta[target] / d y[cell]`.
    pub influence: Vec<f64>,
}

fn load(csv: &str, dims: &str, loss: &str, lower: f64, upper: f64) -> Result<(RakingData, Problem), DemoError> {
    let decls: Vec<DimDecl> = dims.split(',').map(str::trim).filter(|d| !d.is_empty()).map(DimDecl::new).collect();
    if decls.is_empty() {
        return Err(DemoError::Input("name at least one dimension column".into()));
    }
    let data = read_csv(csv.as_bytes(), &Schema::new(decls))?;
    let kind: LossKind = loss.parse().map_err(|_| DemoError::Input(format!("unknown loss `{loss}`")))?;
    let cfg = match kind {
        LossKind::Logistic => LossConfig::logistic(lower, upper),
        k => LossConfig::new(k),
    };
    let problem = build_problem(&data, &cfg)?;
    Ok((data, problem))
}

fn labels(data: &RakingData) -> Vec<String> {
    (0..data.n_cells()).map(|i| data.cell_labels(i).join(":")).collect()
}

fn observed_inputs(problem: &Problem) -> Vec<Option<f64>> {
    let mut out = vec![None; problem.p()];
    for (&i, &v) in problem.observed().iter().zip(problem.y()) {
        out[i] = Some(v);
    }
    out
}

/// Rake a CSV table. Bounds are read only by the logistic loss.
pub fn rake(csv: &str, dims: &str, loss: &str, lower: f64, upper: f64) -> Result<RakeReport, DemoError> {
    let (data, problem) = load(csv, dims, loss, lower, upper)?;
    let sol = solve(&problem, &SolverOptions::default())?;
    let cells = labels(&data)
        .into_iter()
        .zip(observed_inputs(&problem))
        .zip(&sol.beta)
        .map(|((label, input), &raked)| CellOut { label, input, raked })
        .collect();
    let d = sol.diagnostics;
    Ok(RakeReport {
        shape: data.shape(),
        cells,
        path: d.path,
        iterations: d.outer_iterations,
        max_violation: d.max_violation,
        warnings: data.warnings,
    })
}

fn trace(result: Result<Solution, SolverError>) -> Vec<TracePoint> {
    let sol = match result {
        Ok(sol) => sol,
        Err(SolverError::NoConvergence { partial, .. }) => *partial,
        Err(_) => return Vec::new(),
    };
    sol.diagnostics.trace.iter().map(|r| TracePoint { matvecs: r.matvecs, max_violation: r.max_violation }).collect()
}

/// IPF and dual Newton on a random `rows x cols` table with `log y ~ N(0, sigma^2)`
/// and uniform margins.
pub fn race(rows: usize, cols: usize, sigma: f64, seed: u64) -> Result<RaceReport, DemoError> {
    if !(2..=MAX_RACE_SIDE).contains(&rows) || !(2..=MAX_RACE_SIDE).contains(&cols) {
        return Err(DemoError::Input(format!("table sides must lie in 2..={MAX_RACE_SIDE}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(DemoError::Input(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (sigma * z).exp()
        })
        .collect();
    let s_r = vec![1.0 / rows as f64; rows];
    let s_c = vec![1.0 / cols as f64; cols];
    let opts = SolverOptions { grad_tol: 1e-11, max_outer: 200, krylov_maxit: 500, ..SolverOptions::default() };

    let ipf = trace(solve_ipf_2d(&TwoWay::new(rows, cols, y.clone(), s_r.clone(), s_c.clone()), &opts));

    // the last column total follows from the others
    let a_rows: Vec<Vec<usize>> = (0..rows)
        .map(|i| (0..cols).map(|j| i * cols + j).collect())
        .chain((0..cols - 1).map(|j| (0..rows).map(|i| i * cols + j).collect()))
        .collect();
    let a = AggOperator::new(a_rows, rows * cols).expect("indices in range");
    let s = s_r.iter().chain(&s_c[..cols - 1]).copied().collect();
    let problem = ProblemSpec::new(LossKind::Entropic, y, a, s).shape(vec![rows, cols]).full_rank().compile();
    let newton = match problem {
        Ok(p) => trace(solve_newton_dual(&p, &opts)),
        Err(e) => return Err(DemoError::Input(e.to_string())),
    };
    Ok(RaceReport { ipf, newton })
}

/// Delta-method spread of the raked table when every observation carries
/// variance `variance` and the margins are exact, plus the influence of each
/// observation on cell `target`. Bounds are read only by the logistic loss.
pub fn sensitivity(
    csv: &str,
    dims: &str,
    loss: &str,
    lower: f64,
    upper: f64,
    variance: f64,
    target: usize,
) -> Result<SensitivityReport, DemoError> {
    let (data, problem) = load(csv, dims, loss, lower, upper)?;
    if problem.has_missing() {
        return Err(DemoError::Input("fill in every cell first".into()));
    }
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(DemoError::Input(format!("variance must be finite and non-negative, got {variance}")));
    }
    if target >= problem.p() {
        return Err(DemoError::Input(format!("cell {target} is outside a table of {}", problem.p())));
    }
    let sol = solve(&problem, &SolverOptions::default())?;
    let n_obs = problem.observed().len();
    let mut var = vec![0.0; n_inputs(&problem)];
    var[..n_obs].fill(variance);
    let cov = delta_covariance(&problem, &sol, &InputCovariance::Diagonal(var))?;
    let mut influence = vec![0.0; problem.p()];
    for (k, &cell) in problem.observed().iter().enumerate() {
        influence[cell] = cov.sensitivity[(target, k)];
    }
    Ok(SensitivityReport {
        shape: data.shape(),
        labels: labels(&data),
        target,
        raked: sol.beta,
        input_sd: variance.sqrt(),
        sd: cov.std_devs(),
        influence,
    })
}

fn to_js<T: Serialize>(r: Result<T, DemoError>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn rake_table(csv: &str, dims: &str, loss: &str, lower: f64, upper: f64) -> Result<String, JsValue> {
    to_js(rake(csv, dims, loss, lower, upper))
}

#[wasm_bindgen]
pub fn bench_convergence(rows: usize, cols: usize, sigma: f64, seed: u32) -> Result<String, JsValue> {
    to_js(race(rows, cols, sigma, seed as u64))
}

#[wasm_bindgen]
pub fn sensitivity_map(
    csv: &str,
    dims: &str,
    loss: &str,
    lower: f64,
    upper: f64,
    variance: f64,
    target: usize,
) -> Result<String, JsValue> {
    to_js(sensitivity(csv, dims, loss, lower, upper, variance, target))
}
