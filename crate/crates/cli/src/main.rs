use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rakekit::loss::LossKind;
use rakekit::solver::{Path, SolverOptions};
use rakekit_cli::bench::{run_bench, BenchConfig};
use rakekit_cli::experiments::{cmd_experiment, ExperimentOptions};
use rakekit_cli::run::{cmd_solve, cmd_uq, BoundSource, CovSource, RunConfig, UqMode};
use rakekit_cli::CliError;

#[derive(Parser)]
#[command(name = "rakekit", version, about = "Rake tables to known margins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rake a CSV table and write the raked values.
    Solve(RunArgs),
    /// Rake, then propagate input uncertainty to the raked values.
    Uq(RunArgs),
    /// Compare IPF and dual Newton on random two-way tables.
    Bench(BenchArgs),
    /// Regenerate one of the synthetic scenarios as CSV.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Chi2,
    Entropic,
    Logistic,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Chi2 => LossKind::Chi2,
            Loss::Entropic => LossKind::Entropic,
            Loss::Logistic => LossKind::Logistic,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Uq {
    Delta,
    Draws,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    input: PathBuf,
    /// Dimension columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<String>,
    /// Aggregate marker: one for every dimension or one per dimension.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    sentinel: Vec<String>,
    #[arg(long, default_value = "value")]
    value_col: String,
    #[arg(long, default_value = "weights")]
    weight_col: String,
    #[arg(long, value_enum, default_value = "entropic")]
    loss: Loss,
    /// Lower bound: a number or a column name.
    #[arg(long)]
    lower: Option<String>,
    /// Upper bound: a number or a column name.
    #[arg(long)]
    upper: Option<String>,
    /// Input covariance as a square CSV over the valued rows, in file order.
    #[arg(long, conflicts_with = "variance_col")]
    cov: Option<PathBuf>,
    /// Column holding per-row input variances.
    #[arg(long)]
    variance_col: Option<String>,
    #[arg(long, value_enum, default_value = "delta")]
    uq: Uq,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip draws that fail to solve instead of stopping.
    #[arg(long)]
    reject_invalid: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    diag: Option<PathBuf>,
    /// Sensitivity matrix output (delta mode).
    #[arg(long)]
    sensitivity: Option<PathBuf>,
    /// Run this solver instead of the automatic choice.
    #[arg(long)]
    force_path: Option<String>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    cons_tol: Option<f64>,
}

impl RunArgs {
    fn into_config(self, with_uq: bool) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::new(self.input, self.dims, self.out);
        cfg.sentinels = self.sentinel;
        cfg.value_col = self.value_col;
        cfg.weight_col = self.weight_col;
        cfg.loss = self.loss.into();
        cfg.lower = self.lower.as_deref().map(BoundSource::parse);
        cfg.upper = self.upper.as_deref().map(BoundSource::parse);
        cfg.cov = match (self.cov, self.variance_col) {
            (Some(p), _) => Some(CovSource::Matrix(p)),
            (None, Some(c)) => Some(CovSource::VarianceColumn(c)),
            (None, None) => None,
        };
        if with_uq {
            cfg.uq = match self.uq {
                Uq::Delta => UqMode::Delta,
                Uq::Draws => UqMode::Draws { n: self.draws, seed: self.seed, reject_invalid: self.reject_invalid },
            };
        }
        cfg.diag = self.diag;
        cfg.sensitivity_out = self.sensitivity;
        cfg.force_path = self.force_path.as_deref().map(str::parse::<Path>).transpose()?;
        let d = SolverOptions::default();
        cfg.solver = SolverOptions {
            max_outer: self.max_outer.unwrap_or(d.max_outer),
            grad_tol: self.grad_tol.unwrap_or(d.grad_tol),
            cons_tol: self.cons_tol.unwrap_or(d.cons_tol),
            ..d
        };
        Ok(cfg)
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Use the 300 x 200 table instead of 30 x 20.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Standard deviation of log y.
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// loss_comparison, weights_simulation, aggregate_observations,
    /// missing_data or uq_comparison.
    name: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Multiply by U[1.0, 1.1] rather than U[10, 11] in aggregate_observations.
    #[arg(long)]
    gentle_noise: bool,
    /// Weight of mean-imputed cells in missing_data.
    #[arg(long, default_value_t = 1e-3)]
    fill_weight: f64,
    #[arg(long, default_value_t = 500)]
    simulations: usize,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    /// Monte Carlo sample sizes for uq_comparison.
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000,100000")]
    uq_draws: Vec<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(args) => {
            let out = args.out.clone();
            let o = cmd_solve(&args.into_config(false)?)?;
            let d = &o.solution.diagnostics;
            println!(
                "{}: {} iterations, {} matvecs, violation {:.3e} -> {}",
                d.path,
                d.outer_iterations,
                d.matvecs,
                d.max_violation,
                out.display()
            );
        }
        Command::Uq(args) => {
            let out = args.out.clone();
            cmd_uq(&args.into_config(true)?)?;
            println!("wrote {}", out.display());
        }
        Command::Bench(args) => {
            let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
            let mut cfg = if args.full { BenchConfig::full(seeds) } else { BenchConfig::desk(seeds) };
            cfg.rows = args.rows.unwrap_or(cfg.rows);
            cfg.cols = args.cols.unwrap_or(cfg.cols);
            cfg.sigma = args.sigma;
            if cfg.rows < 2 || cfg.cols < 2 {
                return Err(CliError::Input("bench tables need at least 2 rows and 2 columns".into()));
            }
            let (frame, summary) = run_bench(&cfg);
            frame.write_path(&args.out)?;
            let fmt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
            println!("seed,ipf_matvecs,newton_matvecs");
            for s in &summary {
                println!("{},{},{}", s.seed, fmt(s.ipf), fmt(s.newton));
            }
            let wins = summary.iter().filter(|s| s.newton_wins()).count();
            println!("newton needed fewer matvecs on {wins} of {} seeds", summary.len());
        }
        Command::Experiment(args) => {
            let opts = ExperimentOptions {
                seed: args.seed,
                replicates: args.replicates,
                simulations: args.simulations,
                gentle_noise: args.gentle_noise,
                fill_weight: args.fill_weight,
                uq_draws: args.uq_draws,
            };
            for p in cmd_experiment(&args.name, &opts, &args.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("RAKEKIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: RAKEKIT_THREADS ignored: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
