//! Solvers for the raking dual.
//!
//! [`solve`] picks the most specialised method that applies to a problem and
//! records which one ran in [`Diagnostics::path`].

pub(crate) mod chi2;
mod ipf;
pub mod krylov;
mod missing;
mod newton;
mod one_d;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::dense::norm_inf;
use crate::loss::LossKind;
use crate::problem::Problem;

pub use chi2::solve_chi2_closed_form;
pub use ipf::{solve_ipf_2d, TwoWay};
pub use missing::solve_missing;
pub use newton::solve_newton_dual;
pub use one_d::solve_1d_entropic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub max_outer: usize,
    /// Infinity norm of the dual gradient, relative to `max(1, |s|_inf)`.
    pub grad_tol: f64,
    /// Largest constraint violation, relative to `max(1, |s|_inf)`.
    pub cons_tol: f64,
    /// Krylov relative tolerance; with `adaptive_forcing` it is the floor.
    pub krylov_rtol: f64,
    /// Loosen the Krylov tolerance while far from the optimum.
    pub adaptive_forcing: bool,
    pub krylov_maxit: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Smallest line-search step before giving up.
    pub min_step: f64,
    /// Budget of half-sweeps for proportional fitting.
    pub ipf_max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer: 50,
            grad_tol: 1e-10,
            cons_tol: 1e-8,
            krylov_rtol: 1e-4,
            adaptive_forcing: true,
            krylov_maxit: 100,
            armijo_c: 1e-4,
            min_step: 2f64.powi(-30),
            ipf_max_sweeps: 100_000,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [self.grad_tol, self.cons_tol, self.krylov_rtol, self.armijo_c, self.min_step];
        if positive.iter().any(|t| !(*t > 0.0))
            || self.max_outer == 0
            || self.krylov_maxit == 0
            || self.ipf_max_sweeps == 0
        {
            return Err(SolverError::InvalidOptions(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Which algorithm produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Path {
    #[serde(rename = "1d_closed_form")]
    OneDClosedForm,
    #[serde(rename = "1d_weighted_newton")]
    OneDWeightedNewton,
    #[serde(rename = "chi2_closed_form")]
    Chi2ClosedForm,
    #[serde(rename = "ipf_2d")]
    Ipf2d,
    #[serde(rename = "newton_dual")]
    NewtonDual,
    #[serde(rename = "reduced_dual_newton")]
    ReducedDualNewton,
}

impl Path {
    pub const ALL: [Path; 6] = [
        Path::OneDClosedForm,
        Path::OneDWeightedNewton,
        Path::Chi2ClosedForm,
        Path::Ipf2d,
        Path::NewtonDual,
        Path::ReducedDualNewton,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Path::OneDClosedForm => "1d_closed_form",
            Path::OneDWeightedNewton => "1d_weighted_newton",
            Path::Chi2ClosedForm => "chi2_closed_form",
            Path::Ipf2d => "ipf_2d",
            Path::NewtonDual => "newton_dual",
            Path::ReducedDualNewton => "reduced_dual_newton",
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Path {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Path::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| SolverError::UnknownPath(s.to_string()))
    }
}

/// One line of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterRecord {
    pub iteration: usize,
    /// Cumulative operator applications so far.
    pub matvecs: u64,
    pub dual_objective: f64,
    pub grad_inf: f64,
    pub max_violation: f64,
    /// Accepted line-search step (1 for non-Newton updates).
    pub step: f64,
    pub krylov_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub path: Path,
    pub converged: bool,
    pub outer_iterations: usize,
    pub matvecs: u64,
    pub dual_objective: f64,
    pub grad_inf: f64,
    /// `max |A beta - s|` over all constraint rows, including pruned ones.
    pub max_violation: f64,
    pub trace: Vec<IterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    /// Raked values over all cells.
    pub beta: Vec<f64>,
    /// Multipliers for the retained constraints followed by the aggregate
    /// observations.
    pub lambda: Vec<f64>,
    /// Fitted aggregate observations.
    pub zeta: Vec<f64>,
    /// True for missing cells whose value was recovered.
    pub recovered: Vec<bool>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("input {index} must be positive, got {value}")]
    NonPositiveInput { index: usize, value: f64 },
    #[error("row margins total {rows} but column margins total {cols}")]
    InconsistentMargins { rows: f64, cols: f64 },
    #[error(
        "{path} did not converge after {iterations} iterations \
         (gradient {grad_inf:.3e}, violation {max_violation:.3e})"
    )]
    NoConvergence { path: Path, iterations: usize, grad_inf: f64, max_violation: f64, partial: Box<Solution> },
    #[error("{path}: singular linear system ({detail})")]
    SingularSystem { path: Path, detail: String },
    #[error("missing cells {cells:?} are not determined by the aggregates")]
    MissingUnrecoverable { cells: Vec<usize>, partial: Box<Solution> },
    #[error("path {path} does not apply: {reason}")]
    PathNotApplicable { path: Path, reason: String },
    #[error("unknown solver path `{0}`")]
    UnknownPath(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
}

/// Solve with the most specialised applicable method.
pub fn solve(problem: &Problem, opts: &SolverOptions) -> Result<Solution, SolverError> {
    opts.validate()?;
    let path = Path::ALL.into_iter().find(|&p| applicable(problem, p).is_ok()).expect("the generic paths always apply");
    run(problem, path, opts)
}

/// Solve with a specific method, failing if it does not apply.
pub fn solve_with_path(problem: &Problem, path: Path, opts: &SolverOptions) -> Result<Solution, SolverError> {
    opts.validate()?;
    applicable(problem, path).map_err(|reason| SolverError::PathNotApplicable { path, reason })?;
    run(problem, path, opts)
}

fn run(problem: &Problem, path: Path, opts: &SolverOptions) -> Result<Solution, SolverError> {
    match path {
        Path::OneDClosedForm | Path::OneDWeightedNewton => {
            let loss = problem.loss();
            let weights = (path == Path::OneDWeightedNewton).then(|| loss.weights());
            let mut sol = solve_1d_entropic(loss.reference(), weights, problem.s()[0], opts)?;
            if path == Path::OneDClosedForm {
                // the closed form reports the multiplier for unit weights
                sol.lambda[0] *= loss.weights()[0];
            }
            Ok(finish(problem, sol))
        }
        Path::Chi2ClosedForm => solve_chi2_closed_form(problem, opts),
        Path::Ipf2d => {
            let tw = TwoWay::from_problem(problem).expect("checked by applicable");
            solve_ipf_2d(&tw, opts).map(|s| finish(problem, tw.into_problem_order(problem, s)))
        }
        Path::NewtonDual => solve_newton_dual(problem, opts),
        Path::ReducedDualNewton => solve_missing(problem, opts),
    }
}

/// Recompute the full-constraint violation for a solution produced on a
/// sub-representation of the problem.
fn finish(problem: &Problem, mut sol: Solution) -> Solution {
    sol.diagnostics.max_violation = max_violation(problem, &sol.beta);
    sol.diagnostics.dual_objective = newton::Dual::new(problem).evaluate(&sol.lambda).objective;
    sol
}

pub(crate) fn max_violation(problem: &Problem, beta: &[f64]) -> f64 {
    let ab = problem.a_full().apply(beta).expect("length p");
    ab.iter().zip(problem.s_full()).fold(0.0, |m, (a, s)| m.max((a - s).abs()))
}

/// Tolerance scale `max(1, |s|_inf, |s_b|_inf)`.
pub(crate) fn tol_scale(problem: &Problem) -> f64 {
    1f64.max(norm_inf(problem.s())).max(norm_inf(problem.s_b()))
}

fn uniform_finite_weights(problem: &Problem) -> bool {
    let w = problem.loss().weights();
    w.iter().all(|&x| x.is_finite() && x == w[0])
}

fn applicable(problem: &Problem, path: Path) -> Result<(), String> {
    let plain = !problem.has_missing() && problem.b().nrows() == 0;
    let one_d = plain
        && problem.kind() == LossKind::Entropic
        && problem.a_full().nrows() == 1
        && problem.a_full().row(0).len() == problem.p();
    match path {
        Path::OneDClosedForm => {
            if !one_d {
                return Err("needs one entropic total over all cells and no other aggregates".into());
            }
            if !uniform_finite_weights(problem) {
                return Err("needs equal finite weights".into());
            }
            Ok(())
        }
        Path::OneDWeightedNewton => one_d.then_some(()).ok_or_else(|| "needs one entropic total over all cells".into()),
        Path::Chi2ClosedForm => {
            if !plain || problem.kind() != LossKind::Chi2 {
                return Err("needs chi2 loss, constraints only and no missing cells".into());
            }
            Ok(())
        }
        Path::Ipf2d => {
            if !plain || problem.kind() != LossKind::Entropic || !uniform_finite_weights(problem) {
                return Err("needs entropic loss with equal finite weights and constraints only".into());
            }
            if problem.y().iter().any(|&v| v <= 0.0) {
                return Err("needs positive observations".into());
            }
            TwoWay::from_problem(problem)
                .map(|_| ())
                .ok_or_else(|| "needs exactly the row and column totals of a 2D table".into())
        }
        Path::NewtonDual => {
            if problem.has_missing() {
                return Err("problem has missing cells".into());
            }
            Ok(())
        }
        Path::ReducedDualNewton => Ok(()),
    }
}
