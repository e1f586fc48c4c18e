//! Delta method through the optimality conditions.
//!
//! At the solution, `grad f(beta; y) + B^T grad g(B beta; s_b) + A^T lambda = 0`
//! and `A beta = s`. Differentiating both in the inputs gives a symmetric
//! saddle-point system whose solution columns are `d(beta, lambda) / d input`.
//! Cells pinned by an infinite weight (or frozen at zero) satisfy
//! `d beta_i = d y_i` and are moved to the right-hand side.

use nalgebra::DMatrix;

use super::{input_labels, n_inputs, CovarianceResult, InputCovariance, UqError};
use crate::problem::Problem;
use crate::solver::krylov::minres;
use crate::solver::Solution;

/// Largest saddle-point system solved densely.
pub const DENSE_KKT_LIMIT: usize = 2000;

pub fn delta_covariance(
    problem: &Problem,
    solution: &Solution,
    cov: &InputCovariance,
) -> Result<CovarianceResult, UqError> {
    if problem.has_missing() {
        return Err(UqError::Unsupported("problems with missing cells".into()));
    }
    if !solution.diagnostics.converged || solution.beta.len() != problem.p() {
        return Err(UqError::NotConverged);
    }
    let n_in = n_inputs(problem);
    cov.validate(n_in)?;
    let j = sensitivity(problem, &solution.beta)?;
    Ok(CovarianceResult { sigma_beta: cov.sandwich(&j), sensitivity: j, labels: input_labels(problem) })
}

/// `d beta / d (y, s, s_b)` at a solution of a fully observed problem.
pub(crate) fn sensitivity(problem: &Problem, beta: &[f64]) -> Result<DMatrix<f64>, UqError> {
    let p = problem.p();
    let loss = problem.loss();
    let a = problem.a();
    let b = problem.b();
    let ka = a.nrows();
    let k_full = problem.a_full().nrows();
    let n_in = n_inputs(problem);

    let frozen: Vec<bool> = (0..p).map(|i| loss.is_frozen(i)).collect();
    let mut pos = vec![usize::MAX; p];
    let mut free = Vec::new();
    for i in 0..p {
        if !frozen[i] {
            pos[i] = free.len();
            free.push(i);
        }
    }
    let nf = free.len();
    let h = loss.hess_diag(beta)?;
    let mixed = loss.mixed_diag(beta)?;
    let (hg, mg) = match problem.loss_b() {
        Some(g) => {
            let zeta = b.apply(beta).expect("length p");
            (g.hess_diag(&zeta)?, g.mixed_diag(&zeta)?)
        }
        None => (Vec::new(), Vec::new()),
    };

    let n = nf + ka;
    let mut kkt = DMatrix::zeros(n, n);
    for (q, &i) in free.iter().enumerate() {
        kkt[(q, q)] = h[i];
    }
    for (r, row) in b.rows().iter().enumerate() {
        for &i in row.iter().filter(|&&i| !frozen[i]) {
            for &jj in row.iter().filter(|&&jj| !frozen[jj]) {
                kkt[(pos[i], pos[jj])] += hg[r];
            }
        }
    }
    for (q, row) in a.rows().iter().enumerate() {
        for &i in row.iter().filter(|&&i| !frozen[i]) {
            kkt[(nf + q, pos[i])] = 1.0;
            kkt[(pos[i], nf + q)] = 1.0;
        }
    }

    // right-hand side: minus the derivative of the conditions in each input
    let mut rhs = DMatrix::zeros(n, n_in);
    let mut a_rows_of = vec![Vec::new(); p];
    for (q, row) in a.rows().iter().enumerate() {
        row.iter().for_each(|&c| a_rows_of[c].push(q));
    }
    let mut b_rows_of = vec![Vec::new(); p];
    for (r, row) in b.rows().iter().enumerate() {
        row.iter().for_each(|&c| b_rows_of[c].push(r));
    }
    for c in 0..p {
        if !frozen[c] {
            rhs[(pos[c], c)] = -mixed[c];
        } else {
            for &r in &b_rows_of[c] {
                for &jj in b.row(r).iter().filter(|&&jj| !frozen[jj]) {
                    rhs[(pos[jj], c)] -= hg[r];
                }
            }
            for &q in &a_rows_of[c] {
                rhs[(nf + q, c)] -= 1.0;
            }
        }
    }
    for (q, &r) in problem.retained().iter().enumerate() {
        rhs[(nf + q, p + r)] = 1.0;
    }
    for (r, row) in b.rows().iter().enumerate() {
        for &jj in row.iter().filter(|&&jj| !frozen[jj]) {
            rhs[(pos[jj], p + k_full + r)] = -mg[r];
        }
    }

    let x = if n <= DENSE_KKT_LIMIT {
        let lu = kkt.lu();
        lu.solve(&rhs).ok_or(UqError::SingularKkt)?
    } else {
        let mut x = DMatrix::zeros(n, n_in);
        for c in 0..n_in {
            let col: Vec<f64> = rhs.column(c).iter().copied().collect();
            if col.iter().all(|&v| v == 0.0) {
                continue;
            }
            let r = minres(
                |v| (&kkt * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec(),
                &col,
                None,
                1e-12,
                10 * n,
            );
            if r.breakdown || !r.converged {
                return Err(UqError::SingularKkt);
            }
            x.set_column(c, &nalgebra::DVector::from_column_slice(&r.x));
        }
        x
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(UqError::SingularKkt);
    }

    let mut j = DMatrix::zeros(p, n_in);
    for i in 0..p {
        if frozen[i] {
            j[(i, i)] = 1.0;
        } else {
            j.row_mut(i).copy_from(&x.row(pos[i]));
        }
    }
    Ok(j)
}
