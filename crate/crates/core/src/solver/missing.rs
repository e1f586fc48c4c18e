//! Raking with missing cells.
//!
//! Missing cells carry no loss, so the dual is only defined on multipliers
//! whose aggregate image vanishes on those cells:
//! `X^T lambda = 0` with `X = [A; B][:, missing]`. Writing `lambda = N mu`
//! for a basis `N` of that null space keeps every Newton iterate feasible.
//! Once the observed cells are raked, the missing ones solve
//! `X beta_missing = (s - A_obs beta_obs, zeta - B_obs beta_obs)`.

use nalgebra::{DMatrix, DVector};

use super::newton::{newton_loop, Dual, DualPoint};
use super::{max_violation, tol_scale, Diagnostics, Path, Solution, SolverError, SolverOptions};
use crate::dense::{least_squares_identified, norm_inf, null_space};
use crate::problem::Problem;

/// Relative singular-value cutoff for the recovery system.
pub const RECOVERY_RANK_RTOL: f64 = 1e-10;

pub fn solve_missing(problem: &Problem, opts: &SolverOptions) -> Result<Solution, SolverError> {
    opts.validate()?;
    let path = Path::ReducedDualNewton;
    let missing = problem.missing();
    let ka = problem.a().nrows();
    let kb = problem.b().nrows();
    let k = ka + kb;
    let a_m = problem.a().select_cols(missing);
    let b_m = problem.b().select_cols(missing);
    let mut x = DMatrix::zeros(k, missing.len());
    for (r, row) in a_m.rows().iter().chain(b_m.rows()).enumerate() {
        for &c in row {
            x[(r, c)] = 1.0;
        }
    }
    let n = null_space(&x.transpose(), 1e-10);

    let mut dual = Dual::new(problem);
    let scale = tol_scale(problem);
    let viol = |pt: &DualPoint| {
        // component of the gradient that no choice of missing cells can absorb
        let mu = n.transpose() * DVector::from_column_slice(&pt.grad);
        let proj = &n * mu;
        norm_inf(&proj.as_slice()[..ka])
    };
    let run = newton_loop(&mut dual, Some(&n), scale, opts, path, &viol)?;

    let g = DVector::from_column_slice(&run.point.grad);
    let (vals, identified) = least_squares_identified(&x, &g, RECOVERY_RANK_RTOL);
    let mut beta = problem.scatter_observed(&run.point.beta, f64::NAN);
    let mut recovered = vec![false; problem.p()];
    let mut unidentified = Vec::new();
    for (j, &cell) in missing.iter().enumerate() {
        if identified[j] {
            beta[cell] = vals[j];
            recovered[cell] = true;
        } else {
            unidentified.push(cell);
        }
    }
    let violation = if unidentified.is_empty() { max_violation(problem, &beta) } else { f64::NAN };
    let sol = Solution {
        beta,
        lambda: run.point.lambda.clone(),
        zeta: run.point.zeta.clone(),
        recovered,
        diagnostics: Diagnostics {
            path,
            converged: run.converged,
            outer_iterations: run.iterations,
            matvecs: run.matvecs,
            dual_objective: run.point.objective,
            grad_inf: run.grad_inf,
            max_violation: violation,
            trace: run.trace,
        },
    };
    if !run.converged {
        return Err(SolverError::NoConvergence {
            path,
            iterations: run.iterations,
            grad_inf: run.grad_inf,
            max_violation: violation,
            partial: Box::new(sol),
        });
    }
    if !unidentified.is_empty() {
        return Err(SolverError::MissingUnrecoverable { cells: unidentified, partial: Box::new(sol) });
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{two_way_margins, AggOperator};
    use crate::loss::LossKind;
    use crate::problem::ProblemSpec;
    use crate::solver::solve_newton_dual;

    /// Cells (1,1), (1,2), (2,1), (2,2); only the first is observed.
    fn corner(rows: Vec<Vec<usize>>, s: Vec<f64>) -> Problem {
        ProblemSpec::new(LossKind::Entropic, vec![2.0], AggOperator::new(rows, 4).unwrap(), s)
            .observed(vec![0], 4)
            .compile()
            .unwrap()
    }

    #[test]
    fn recovers_corner_entries() {
        let r = 5.0;
        let p = corner(vec![vec![0, 1], vec![0, 2], vec![2, 3]], vec![3.0, 2.0, r]);
        let sol = solve_missing(&p, &SolverOptions::default()).unwrap();
        assert!((sol.beta[0] - 2.0).abs() < 1e-12);
        assert!((sol.beta[1] - 1.0).abs() < 1e-10);
        assert!(sol.beta[2].abs() < 1e-10);
        assert!((sol.beta[3] - r).abs() < 1e-10);
        assert_eq!(sol.recovered, vec![false, true, true, true]);
    }

    #[test]
    fn flags_unidentified_entry() {
        let p = corner(vec![vec![0, 1], vec![0, 2]], vec![3.0, 2.0]);
        match solve_missing(&p, &SolverOptions::default()) {
            Err(SolverError::MissingUnrecoverable { cells, partial }) => {
                assert_eq!(cells, vec![3]);
                assert!((partial.beta[1] - 1.0).abs() < 1e-10);
                assert!(partial.beta[3].is_nan());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_missing_matches_plain_newton() {
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = ProblemSpec::new(LossKind::Entropic, y, two_way_margins(2, 3), vec![8.0, 16.0, 6.0, 8.0, 10.0])
            .compile()
            .unwrap();
        let a = solve_missing(&p, &SolverOptions::default()).unwrap();
        let b = solve_newton_dual(&p, &SolverOptions::default()).unwrap();
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn missing_cell_in_two_way_table() {
        // 2x3 table, cell (1,1) missing, all margins known
        let truth = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = two_way_margins(2, 3);
        let s = a.apply(&truth).unwrap();
        let y: Vec<f64> = truth[1..].iter().map(|v| v * 1.1).collect();
        let p = ProblemSpec::new(LossKind::Chi2, y, a, s.clone()).observed(vec![1, 2, 3, 4, 5], 6).compile().unwrap();
        let sol = solve_missing(&p, &SolverOptions::default()).unwrap();
        let ab = two_way_margins(2, 3).apply(&sol.beta).unwrap();
        for (x, t) in ab.iter().zip(&s) {
            assert!((x - t).abs() < 1e-8);
        }
        // the observed cells have (k - |M|) = 4 free dual directions
        assert!(sol.recovered[0]);
    }
}
