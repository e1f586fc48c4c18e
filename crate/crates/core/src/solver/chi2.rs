//! Closed-form chi-square raking.
//!
//! For `f(beta) = sum w (beta - y)^2 / (2 y)` the dual is quadratic:
//! with `D = diag(y / w)`,
//! `lambda = (A D A^T)^{-1} (A y - s)` and `beta = y - D A^T lambda`.

use nalgebra::{DMatrix, DVector};

use super::krylov::minres;
use super::newton::Dual;
use super::{max_violation, Diagnostics, Path, Solution, SolverError, SolverOptions};
use crate::linop::{AggOperator, Stack};
use crate::loss::LossKind;
use crate::problem::Problem;

/// Largest constraint count solved with a dense factorisation.
const DENSE_LIMIT: usize = 2000;

/// `A diag(d) A^T` as a dense matrix.
pub(crate) fn weighted_gram(a: &AggOperator, d: &[f64]) -> DMatrix<f64> {
    let k = a.nrows();
    let mut by_col: Vec<Vec<usize>> = vec![Vec::new(); a.ncols()];
    for (r, row) in a.rows().iter().enumerate() {
        for &c in row {
            by_col[c].push(r);
        }
    }
    let mut g = DMatrix::zeros(k, k);
    for (c, rows) in by_col.iter().enumerate() {
        for &i in rows {
            for &j in rows {
                g[(i, j)] += d[c];
            }
        }
    }
    g
}

pub fn solve_chi2_closed_form(problem: &Problem, _opts: &SolverOptions) -> Result<Solution, SolverError> {
    let path = Path::Chi2ClosedForm;
    if problem.kind() != LossKind::Chi2 || problem.has_missing() || problem.b().nrows() > 0 {
        return Err(SolverError::PathNotApplicable {
            path,
            reason: "needs chi2 loss, constraints only and no missing cells".into(),
        });
    }
    let loss = problem.loss();
    let y = loss.reference();
    let d: Vec<f64> = y.iter().zip(loss.weights()).map(|(y, w)| y / w).collect();
    let a = problem.a();
    let mut rhs = a.apply(y).expect("length p");
    rhs.iter_mut().zip(problem.s()).for_each(|(r, s)| *r -= s);
    let k = a.nrows();
    let lambda: Vec<f64> = if k == 0 {
        Vec::new()
    } else if k <= DENSE_LIMIT {
        let g = weighted_gram(a, &d);
        let chol = g.cholesky().ok_or_else(|| SolverError::SingularSystem {
            path,
            detail: "A diag(y/w) A^T is not positive definite".into(),
        })?;
        chol.solve(&DVector::from_column_slice(&rhs)).as_slice().to_vec()
    } else {
        let empty = AggOperator::empty(a.ncols());
        let st = Stack::new(a, &empty).expect("shared columns");
        let diag: Vec<f64> = st.hessian_diag(&d).iter().map(|&h| if h > 0.0 { 1.0 / h } else { 1.0 }).collect();
        let r = minres(|v| st.hvp(&d, v).expect("length k"), &rhs, Some(&diag), 1e-14, 10 * k);
        if r.breakdown {
            return Err(SolverError::SingularSystem { path, detail: "Krylov breakdown".into() });
        }
        r.x
    };
    let atl = a.apply_transpose(&lambda).expect("length k");
    let beta: Vec<f64> = y.iter().zip(&d).zip(&atl).map(|((y, d), t)| y - d * t).collect();
    let mut dual = Dual::new(problem);
    let pt = dual.evaluate(&lambda);
    let grad_inf = pt.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let violation = max_violation(problem, &beta);
    Ok(Solution {
        recovered: vec![false; problem.p()],
        beta,
        lambda,
        zeta: Vec::new(),
        diagnostics: Diagnostics {
            path,
            converged: true,
            outer_iterations: 0,
            matvecs: 1,
            dual_objective: pt.objective,
            grad_inf,
            max_violation: violation,
            trace: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::two_way_margins;
    use crate::problem::ProblemSpec;

    #[test]
    fn one_d_total() {
        let a = AggOperator::new(vec![vec![0, 1, 2]], 3).unwrap();
        let p = ProblemSpec::new(LossKind::Chi2, vec![1.0, 2.0, 3.0], a, vec![12.0]).compile().unwrap();
        let sol = solve_chi2_closed_form(&p, &SolverOptions::default()).unwrap();
        for (b, e) in sol.beta.iter().zip([2.0, 4.0, 6.0]) {
            assert!((b - e).abs() < 1e-14);
        }
        assert!((sol.lambda[0] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn consistent_input_is_unchanged() {
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = two_way_margins(2, 3);
        let s = a.apply(&y).unwrap();
        let p = ProblemSpec::new(LossKind::Chi2, y.clone(), a, s).compile().unwrap();
        let sol = solve_chi2_closed_form(&p, &SolverOptions::default()).unwrap();
        for (b, e) in sol.beta.iter().zip(&y) {
            assert!((b - e).abs() < 1e-14);
        }
    }

    /// Dense KKT system `[[W Y^{-1}, A^T], [A, 0]] (beta, lambda) = (W 1, s)`.
    #[test]
    fn matches_dense_kkt() {
        let (m, n) = (3, 4);
        let y: Vec<f64> = (0..12).map(|i| 0.2 + ((i * 5) % 7) as f64 * 0.3).collect();
        let w: Vec<f64> = (0..12).map(|i| 1.0 + (i % 3) as f64).collect();
        let a = two_way_margins(m, n);
        let s = vec![0.5, 3.0, 6.0, 0.4, 2.0, 5.0, 2.1];
        let p = ProblemSpec::new(LossKind::Chi2, y.clone(), a, s).weights(w.clone()).compile().unwrap();
        let sol = solve_chi2_closed_form(&p, &SolverOptions::default()).unwrap();
        let ad = p.a().assemble_dense().unwrap();
        let k = ad.nrows();
        let mut kkt = DMatrix::zeros(12 + k, 12 + k);
        let mut rhs = DVector::zeros(12 + k);
        for i in 0..12 {
            kkt[(i, i)] = w[i] / y[i];
            rhs[i] = w[i];
        }
        kkt.view_mut((0, 12), (12, k)).copy_from(&ad.transpose());
        kkt.view_mut((12, 0), (k, 12)).copy_from(&ad);
        for (r, &v) in p.s().iter().enumerate() {
            rhs[12 + r] = v;
        }
        let x = kkt.lu().solve(&rhs).unwrap();
        for i in 0..12 {
            assert!((sol.beta[i] - x[i]).abs() < 1e-10);
        }
        assert!(sol.beta.iter().any(|&b| b < 0.0), "this instance has negative raked values");
    }
}
