//! Closed-form sensitivity for chi-square raking with constraints only.
//!
//! With `D = diag(y / w)`, `Phi = A D A^T` and `Lambda = diag(A^T lambda / w)`:
//! `d beta / d y = (I - D A^T Phi^{-1} A)(I - Lambda)` and
//! `d beta / d s = D A^T Phi^{-1}`.

use nalgebra::{DMatrix, DVector};

use super::{input_labels, n_inputs, CovarianceResult, InputCovariance, UqError};
use crate::loss::LossKind;
use crate::problem::Problem;
use crate::solver::chi2::weighted_gram;
use crate::solver::Solution;

pub fn chi2_closed_form_covariance(
    problem: &Problem,
    solution: &Solution,
    cov: &InputCovariance,
) -> Result<CovarianceResult, UqError> {
    if problem.kind() != LossKind::Chi2 || problem.has_missing() || problem.b().nrows() > 0 {
        return Err(UqError::Unsupported("closed form needs chi2 loss, constraints only and no missing cells".into()));
    }
    if !solution.diagnostics.converged || solution.lambda.len() != problem.a().nrows() {
        return Err(UqError::NotConverged);
    }
    let n_in = n_inputs(problem);
    cov.validate(n_in)?;

    let p = problem.p();
    let loss = problem.loss();
    let a = problem.a();
    let ka = a.nrows();
    let d: Vec<f64> = loss.reference().iter().zip(loss.weights()).map(|(y, w)| y / w).collect();
    let atl = a.apply_transpose(&solution.lambda).expect("length k");
    let lam: Vec<f64> = atl.iter().zip(loss.weights()).map(|(t, w)| t / w).collect();

    let mut ad = DMatrix::zeros(ka, p);
    for (q, row) in a.rows().iter().enumerate() {
        for &c in row {
            ad[(q, c)] = 1.0;
        }
    }
    let mut dat = ad.transpose();
    for (c, dc) in d.iter().enumerate() {
        dat.row_mut(c).scale_mut(*dc);
    }
    // G = D A^T Phi^{-1}, computed as (Phi^{-1} A D)^T
    let g = if ka == 0 {
        DMatrix::zeros(p, 0)
    } else {
        let chol = weighted_gram(a, &d)
            .cholesky()
            .ok_or_else(|| UqError::SingularSystem("A diag(y/w) A^T is not positive definite".into()))?;
        chol.solve(&dat.transpose()).transpose()
    };
    let mut proj = DMatrix::identity(p, p) - &g * &ad;
    let scale = DVector::from_iterator(p, lam.iter().map(|l| 1.0 - l));
    for (c, sc) in scale.iter().enumerate() {
        proj.column_mut(c).scale_mut(*sc);
    }

    let mut j = DMatrix::zeros(p, n_in);
    j.view_mut((0, 0), (p, p)).copy_from(&proj);
    for (q, &r) in problem.retained().iter().enumerate() {
        j.column_mut(p + r).copy_from(&g.column(q));
    }
    Ok(CovarianceResult { sigma_beta: cov.sandwich(&j), sensitivity: j, labels: input_labels(problem) })
}
