//! IPF versus dual Newton on random two-way entropic tables.

use rakekit::linop::AggOperator;
use rakekit::loss::LossKind;
use rakekit::problem::ProblemSpec;
use rakekit::solver::{solve_ipf_2d, solve_newton_dual, IterRecord, SolverError, SolverOptions, TwoWay};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::frame::Frame;
use crate::row;

/// Violation level at which the two solvers are compared.
pub const TARGET_VIOLATION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub rows: usize,
    pub cols: usize,
    /// Standard deviation of `log y`.
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub solver: SolverOptions,
}

impl BenchConfig {
    /// Desk-scale default: a 30 x 20 table, `log y ~ N(0, 4)`.
    pub fn desk(seeds: Vec<u64>) -> Self {
        BenchConfig { rows: 30, cols: 20, sigma: 2.0, seeds, solver: bench_options() }
    }

    /// The 300 x 200 configuration.
    pub fn full(seeds: Vec<u64>) -> Self {
        BenchConfig { rows: 300, cols: 200, ..Self::desk(seeds) }
    }
}

/// Tight enough that both traces run past [`TARGET_VIOLATION`].
pub fn bench_options() -> SolverOptions {
    SolverOptions { grad_tol: 1e-11, max_outer: 200, krylov_maxit: 500, ..SolverOptions::default() }
}

/// A two-way table with uniform margins `1/rows` and `1/cols`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub rows: usize,
    pub cols: usize,
    pub y: Vec<f64>,
    pub s_r: Vec<f64>,
    pub s_c: Vec<f64>,
}

impl Instance {
    pub fn random(rows: usize, cols: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (sigma * z).exp()
            })
            .collect();
        Instance { rows, cols, y, s_r: vec![1.0 / rows as f64; rows], s_c: vec![1.0 / cols as f64; cols] }
    }
}

#[derive(Debug, Clone)]
pub struct Run {
    pub solver: &'static str,
    pub trace: Vec<IterRecord>,
    pub error: Option<String>,
}

impl Run {
    /// Cumulative matvecs at the first record with violation at or below `tol`.
    pub fn matvecs_to(&self, tol: f64) -> Option<u64> {
        self.trace.iter().find(|r| r.max_violation <= tol).map(|r| r.matvecs)
    }
}

fn collect(solver: &'static str, result: Result<rakekit::solver::Solution, SolverError>) -> Run {
    match result {
        Ok(sol) => Run { solver, trace: sol.diagnostics.trace, error: None },
        Err(SolverError::NoConvergence { partial, .. }) => {
            let e = format!("no convergence after {} iterations", partial.diagnostics.outer_iterations);
            Run { solver, trace: partial.diagnostics.trace, error: Some(e) }
        }
        Err(e) => Run { solver, trace: Vec::new(), error: Some(e.to_string()) },
    }
}

pub fn run_ipf(inst: &Instance, opts: &SolverOptions) -> Run {
    let tw = TwoWay::new(inst.rows, inst.cols, inst.y.clone(), inst.s_r.clone(), inst.s_c.clone());
    collect("ipf", solve_ipf_2d(&tw, opts))
}

/// Newton on the row totals and all but the last column total, which the
/// others imply.
pub fn run_newton(inst: &Instance, opts: &SolverOptions) -> Run {
    let (m, n) = (inst.rows, inst.cols);
    let rows: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..n).map(|j| i * n + j).collect())
        .chain((0..n - 1).map(|j| (0..m).map(|i| i * n + j).collect()))
        .collect();
    let a = AggOperator::new(rows, m * n).expect("indices in range");
    let s = inst.s_r.iter().chain(&inst.s_c[..n - 1]).copied().collect();
    let problem = ProblemSpec::new(LossKind::Entropic, inst.y.clone(), a, s).shape(vec![m, n]).full_rank().compile();
    match problem {
        Ok(p) => collect("newton", solve_newton_dual(&p, opts)),
        Err(e) => Run { solver: "newton", trace: Vec::new(), error: Some(e.to_string()) },
    }
}

/// Both solvers on one seed.
pub fn bench_seed(cfg: &BenchConfig, seed: u64) -> [Run; 2] {
    let inst = Instance::random(cfg.rows, cfg.cols, cfg.sigma, seed);
    [run_ipf(&inst, &cfg.solver), run_newton(&inst, &cfg.solver)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub ipf: Option<u64>,
    pub newton: Option<u64>,
}

impl SeedSummary {
    pub fn newton_wins(&self) -> bool {
        match (self.newton, self.ipf) {
            (Some(n), Some(i)) => n < i,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

/// Long-format traces plus a per-seed summary.
pub fn run_bench(cfg: &BenchConfig) -> (Frame, Vec<SeedSummary>) {
    let mut frame =
        Frame::new(["seed", "solver", "iteration", "matvecs", "dual_objective", "dual_gap", "max_violation"]);
    let mut summary = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let runs = bench_seed(cfg, seed);
        // both solvers minimise the same dual; the gap is measured from the
        // lowest value either reached
        let best = runs
            .iter()
            .flat_map(|r| r.trace.iter().map(|t| t.dual_objective))
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        for run in &runs {
            if let Some(e) = &run.error {
                eprintln!("seed {seed}: {}: {e}", run.solver);
            }
            for t in &run.trace {
                frame.push(row![
                    seed as usize,
                    run.solver,
                    t.iteration,
                    t.matvecs as usize,
                    t.dual_objective,
                    t.dual_objective - best,
                    t.max_violation
                ]);
            }
        }
        summary.push(SeedSummary {
            seed,
            ipf: runs[0].matvecs_to(TARGET_VIOLATION),
            newton: runs[1].matvecs_to(TARGET_VIOLATION),
        });
    }
    (frame, summary)
}
