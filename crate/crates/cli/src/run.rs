//! The `solve` and `uq` commands.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path as FsPath, PathBuf};

use nalgebra::DMatrix;
use rakekit::loss::LossKind;
use rakekit::problem::Problem;
use rakekit::solver::{solve, solve_with_path, Diagnostics, Path, Solution, SolverError, SolverOptions};
use rakekit::table::{
    build_problem, parse_table, read_records, Bounds, DimDecl, LossConfig, RakingData, RowKind, Schema,
};
use rakekit::uq::{
    delta_covariance, input_labels, monte_carlo_covariance, n_inputs, DrawPolicy, InputCovariance, InputLabel,
    McOptions,
};
use serde::Serialize;

use crate::frame::Frame;
use crate::CliError;

/// A bound given either as one number for every cell or as a column name.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundSource {
    Scalar(f64),
    Column(String),
}

impl BoundSource {
    pub fn parse(raw: &str) -> Self {
        match raw.trim().parse::<f64>() {
            Ok(v) => BoundSource::Scalar(v),
            Err(_) => BoundSource::Column(raw.trim().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovSource {
    /// Square CSV with a header row; one row and column per data row that
    /// carries an input (observed cell, constraint or aggregate), in file
    /// order.
    Matrix(PathBuf),
    /// Per-row variances in a column of the input table.
    VarianceColumn(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UqMode {
    None,
    Delta,
    Draws { n: usize, seed: u64, reject_invalid: bool },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: PathBuf,
    pub dims: Vec<String>,
    /// One sentinel for all dimensions, or one per dimension.
    pub sentinels: Vec<String>,
    pub value_col: String,
    pub weight_col: String,
    pub loss: LossKind,
    pub lower: Option<BoundSource>,
    pub upper: Option<BoundSource>,
    pub solver: SolverOptions,
    pub force_path: Option<Path>,
    pub uq: UqMode,
    pub cov: Option<CovSource>,
    pub out: PathBuf,
    pub diag: Option<PathBuf>,
    /// Where to write the sensitivity matrix in delta mode.
    pub sensitivity_out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, dims: Vec<String>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            input: input.into(),
            dims,
            sentinels: vec!["0".into()],
            value_col: "value".into(),
            weight_col: "weights".into(),
            loss: LossKind::Entropic,
            lower: None,
            upper: None,
            solver: SolverOptions::default(),
            force_path: None,
            uq: UqMode::None,
            cov: None,
            out: out.into(),
            diag: None,
            sensitivity_out: None,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dims.is_empty() {
            return Err(CliError::Input("at least one dimension is needed (--dims)".into()));
        }
        if self.sentinels.len() != 1 && self.sentinels.len() != self.dims.len() {
            return Err(CliError::Input(format!(
                "{} sentinels given for {} dimensions",
                self.sentinels.len(),
                self.dims.len()
            )));
        }
        match (&self.lower, &self.upper) {
            (Some(BoundSource::Column(_)), Some(BoundSource::Scalar(_)))
            | (Some(BoundSource::Scalar(_)), Some(BoundSource::Column(_))) => {
                return Err(CliError::Input("--lower and --upper must both be numbers or both be columns".into()))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(CliError::Input("--lower and --upper must be given together".into()))
            }
            _ => {}
        }
        if self.loss == LossKind::Logistic && self.lower.is_none() {
            return Err(CliError::Input("the logistic loss needs --lower and --upper".into()));
        }
        if self.uq != UqMode::None && self.cov.is_none() {
            return Err(CliError::Input("uncertainty propagation needs --cov or --variance-col".into()));
        }
        if let UqMode::Draws { n, .. } = self.uq {
            if n < 2 {
                return Err(CliError::Input(format!("--draws must be at least 2, got {n}")));
            }
        }
        self.solver.validate()?;
        Ok(())
    }

    fn schema(&self) -> Schema {
        let dims = self
            .dims
            .iter()
            .enumerate()
            .map(|(k, d)| DimDecl::new(d).sentinel(self.sentinels.get(k).unwrap_or(&self.sentinels[0])))
            .collect();
        let schema = Schema::new(dims).value_col(&self.value_col).weight_col(&self.weight_col);
        match (&self.lower, &self.upper) {
            (Some(BoundSource::Column(l)), Some(BoundSource::Column(u))) => schema.bound_cols(l, u),
            _ => schema,
        }
    }

    fn loss_config(&self) -> LossConfig {
        let bounds = match (&self.lower, &self.upper) {
            (Some(BoundSource::Scalar(lower)), Some(BoundSource::Scalar(upper))) => {
                Bounds::Scalar { lower: *lower, upper: *upper }
            }
            (Some(_), Some(_)) => Bounds::Columns,
            _ => Bounds::None,
        };
        LossConfig { kind: self.loss, bounds }
    }
}

/// Parsed input with the raw records kept for output.
pub struct Loaded {
    pub header: Vec<String>,
    pub records: Vec<Vec<String>>,
    pub data: RakingData,
    pub problem: Problem,
}

pub fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    cfg.validate()?;
    let f = File::open(&cfg.input).map_err(CliError::io(&cfg.input))?;
    let (header, records) = read_records(BufReader::new(f))?;
    let data = parse_table(&header, &records, &cfg.schema())?;
    let problem = build_problem(&data, &cfg.loss_config())?;
    Ok(Loaded { header, records, data, problem })
}

/// For every data row, the input coordinate it feeds, if any.
pub fn input_rows(data: &RakingData, problem: &Problem) -> Vec<Option<usize>> {
    let n_obs = problem.observed().len();
    let k_full = problem.a_full().nrows();
    let mut next_b = 0;
    data.rows
        .iter()
        .enumerate()
        .map(|(r, row)| match data.kind(row) {
            RowKind::Observed => {
                let cell = data.cell_index(row).expect("granular row");
                problem.observed().binary_search(&cell).ok()
            }
            RowKind::Missing => None,
            RowKind::Constraint => problem.a_labels().iter().position(|&l| l == r).map(|q| n_obs + q),
            RowKind::AggregateObservation => {
                next_b += 1;
                Some(n_obs + k_full + next_b - 1)
            }
        })
        .collect()
}

/// Cells of `beta` summed over each row's members.
fn row_values(data: &RakingData, beta: &[f64]) -> Vec<f64> {
    data.rows.iter().map(|row| data.members(row).iter().map(|&c| beta[c]).sum()).collect()
}

fn cell_label(data: &RakingData, cell: usize) -> String {
    data.cell_labels(cell).join(":")
}

fn input_label(data: &RakingData, label: InputLabel, b_rows: &[usize]) -> String {
    match label {
        InputLabel::Observation(c) => format!("y[{}]", cell_label(data, c)),
        InputLabel::Margin(r) => format!("s[{}]", data.rows[r].dim_values.join(":")),
        InputLabel::AggregateObservation(k) => format!("s_b[{}]", data.rows[b_rows[k]].dim_values.join(":")),
    }
}

#[derive(Debug, Serialize)]
pub struct DiagReport {
    #[serde(flatten)]
    pub diagnostics: Diagnostics,
    /// Data rows of constraints dropped as redundant.
    pub dropped_rows: Vec<usize>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uq: Option<UqReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UqReport {
    pub method: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accepted: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejected: Option<usize>,
}

/// What a successful command produced.
#[derive(Debug)]
pub struct Outcome {
    pub solution: Solution,
    pub sigma_beta: Option<DMatrix<f64>>,
}

fn run_solver(cfg: &RunConfig, problem: &Problem) -> Result<Solution, SolverError> {
    match cfg.force_path {
        Some(path) => solve_with_path(problem, path, &cfg.solver),
        None => solve(problem, &cfg.solver),
    }
}

fn write_outputs(
    cfg: &RunConfig,
    loaded: &Loaded,
    sol: &Solution,
    sd: Option<(&[f64], &[f64])>,
    uq: Option<UqReport>,
) -> Result<(), CliError> {
    let data = &loaded.data;
    let raked = row_values(data, &sol.beta);
    let mut header = loaded.header.clone();
    header.push("raked_value".into());
    header.push("recovered".into());
    if sd.is_some() {
        header.push("input_sd".into());
        header.push("sd".into());
    }
    let mut frame = Frame::new(header);
    for (r, rec) in loaded.records.iter().enumerate() {
        let mut out = rec.clone();
        out.resize(loaded.header.len(), String::new());
        out.push(rakekit::table::fmt_num(raked[r]));
        let recovered = data.cell_index(&data.rows[r]).is_some_and(|c| sol.recovered[c]);
        out.push(recovered.to_string());
        if let Some((input_sd, row_sd)) = sd {
            out.push(rakekit::table::fmt_num(input_sd[r]));
            out.push(rakekit::table::fmt_num(row_sd[r]));
        }
        frame.rows.push(out);
    }
    frame.write_path(&cfg.out)?;

    if let Some(diag) = &cfg.diag {
        let report = DiagReport {
            diagnostics: sol.diagnostics.clone(),
            dropped_rows: loaded.problem.dropped().iter().map(|&d| loaded.problem.a_labels()[d]).collect(),
            warnings: data.warnings.clone(),
            uq,
        };
        let f = File::create(diag).map_err(CliError::io(diag))?;
        serde_json::to_writer_pretty(f, &report)?;
    }
    Ok(())
}

/// Rake the input and write the raked table and diagnostics.
///
/// On non-convergence or unrecoverable missing cells the partial solution is
/// still written before the error is returned.
pub fn cmd_solve(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let loaded = load(cfg)?;
    match run_solver(cfg, &loaded.problem) {
        Ok(sol) => {
            write_outputs(cfg, &loaded, &sol, None, None)?;
            Ok(Outcome { solution: sol, sigma_beta: None })
        }
        Err(e) => {
            if let SolverError::NoConvergence { partial, .. } | SolverError::MissingUnrecoverable { partial, .. } = &e {
                write_outputs(cfg, &loaded, partial, None, None)?;
            }
            Err(e.into())
        }
    }
}

fn read_covariance(cfg: &RunConfig, loaded: &Loaded) -> Result<InputCovariance, CliError> {
    let rows = input_rows(&loaded.data, &loaded.problem);
    let n = n_inputs(&loaded.problem);
    match cfg.cov.as_ref().expect("validated") {
        CovSource::VarianceColumn(col) => {
            let idx = loaded
                .header
                .iter()
                .position(|h| h == col)
                .ok_or_else(|| CliError::Input(format!("variance column `{col}` not found")))?;
            let mut var = vec![0.0; n];
            for (r, slot) in rows.iter().enumerate() {
                if let Some(i) = slot {
                    let raw = loaded.records[r].get(idx).map(|s| s.trim()).unwrap_or("");
                    var[*i] = raw.parse().map_err(|_| {
                        CliError::Input(format!("row {r}: variance `{raw}` in column `{col}` is not a number"))
                    })?;
                }
            }
            Ok(InputCovariance::Diagonal(var))
        }
        CovSource::Matrix(path) => {
            let f = File::open(path).map_err(CliError::io(path))?;
            let (_, recs) = read_records(BufReader::new(f))?;
            let order: Vec<usize> = rows.iter().flatten().copied().collect();
            let m = order.len();
            if recs.len() != m || recs.iter().any(|r| r.len() != m) {
                return Err(CliError::Input(format!(
                    "{}: expected a {m} x {m} matrix (one per input row of the data)",
                    path.display()
                )));
            }
            let mut cov = DMatrix::zeros(n, n);
            for (a, rec) in recs.iter().enumerate() {
                for (b, raw) in rec.iter().enumerate() {
                    let v: f64 = raw.trim().parse().map_err(|_| {
                        CliError::Input(format!("{}: entry ({a}, {b}) `{raw}` is not a number", path.display()))
                    })?;
                    cov[(order[a], order[b])] = v;
                }
            }
            Ok(InputCovariance::Full(cov))
        }
    }
}

fn sibling(out: &FsPath, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

/// Rake, then propagate input covariance to the raked values.
///
/// Writes the raked table with `input_sd` and `sd` columns, the covariance
/// of the cells next to it (`<out>_sigma.csv`), and the sensitivity matrix
/// (delta mode) or the raked draws (draws mode).
pub fn cmd_uq(cfg: &RunConfig) -> Result<Outcome, CliError> {
    if cfg.uq == UqMode::None {
        return Err(CliError::Input("choose --uq delta or --uq draws".into()));
    }
    let loaded = load(cfg)?;
    let data = &loaded.data;
    let problem = &loaded.problem;
    let cov = read_covariance(cfg, &loaded)?;
    cov.validate(n_inputs(problem))?;
    let sol = run_solver(cfg, problem)?;

    let b_rows: Vec<usize> =
        (0..data.rows.len()).filter(|&r| data.kind(&data.rows[r]) == RowKind::AggregateObservation).collect();
    let (sigma, report) = match cfg.uq {
        UqMode::Delta => {
            let r = delta_covariance(problem, &sol, &cov)?;
            let labels: Vec<String> =
                input_labels(problem).into_iter().map(|l| input_label(data, l, &b_rows)).collect();
            let mut fr = Frame::new(std::iter::once("target".to_string()).chain(labels));
            for i in 0..problem.p() {
                let mut rec = vec![cell_label(data, i)];
                rec.extend(r.sensitivity.row(i).iter().map(|v| rakekit::table::fmt_num(*v)));
                fr.rows.push(rec);
            }
            let path = cfg.sensitivity_out.clone().unwrap_or_else(|| sibling(&cfg.out, "sensitivity"));
            fr.write_path(&path)?;
            (r.sigma_beta, UqReport { method: "delta", draws: None, accepted: None, rejected: None })
        }
        UqMode::Draws { n, seed, reject_invalid } => {
            let opts = McOptions {
                draws: n,
                seed,
                policy: if reject_invalid { DrawPolicy::Reject } else { DrawPolicy::Fail },
                keep_draws: true,
                solver: cfg.solver,
                path: cfg.force_path,
            };
            let r = monte_carlo_covariance(problem, &cov, &opts)?;
            let mut fr =
                Frame::new(std::iter::once("draw".to_string()).chain((0..problem.p()).map(|c| cell_label(data, c))));
            for (d, beta) in r.draws.as_deref().unwrap_or_default().iter().enumerate() {
                let mut rec = vec![d.to_string()];
                rec.extend(beta.iter().map(|v| rakekit::table::fmt_num(*v)));
                fr.rows.push(rec);
            }
            fr.write_path(&sibling(&cfg.out, "draws"))?;
            let report =
                UqReport { method: "draws", draws: Some(n), accepted: Some(r.accepted), rejected: Some(r.rejected) };
            (r.sigma_beta, report)
        }
        UqMode::None => unreachable!("checked above"),
    };

    let labels: Vec<String> = (0..problem.p()).map(|c| cell_label(data, c)).collect();
    let mut fr = Frame::new(std::iter::once("cell".to_string()).chain(labels.iter().cloned()));
    for (i, l) in labels.iter().enumerate() {
        let mut rec = vec![l.clone()];
        rec.extend(sigma.row(i).iter().map(|v| rakekit::table::fmt_num(*v)));
        fr.rows.push(rec);
    }
    fr.write_path(&sibling(&cfg.out, "sigma"))?;

    let input_var = cov.to_dense().diagonal();
    let rows = input_rows(data, problem);
    let input_sd: Vec<f64> = rows.iter().map(|r| r.map_or(f64::NAN, |i| input_var[i].max(0.0).sqrt())).collect();
    let row_sd: Vec<f64> = data
        .rows
        .iter()
        .map(|row| {
            let m = data.members(row);
            m.iter()
                .flat_map(|&i| m.iter().map(move |&j| (i, j)))
                .map(|(i, j)| sigma[(i, j)])
                .sum::<f64>()
                .max(0.0)
                .sqrt()
        })
        .collect();
    write_outputs(cfg, &loaded, &sol, Some((&input_sd, &row_sd)), Some(report))?;
    Ok(Outcome { solution: sol, sigma_beta: Some(sigma) })
}
