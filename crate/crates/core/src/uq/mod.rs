//! Covariance of raked values.
//!
//! Inputs are ordered as observed cells, then every constraint margin as
//! given (including those pruned as redundant), then aggregate observations.
//! The sensitivity matrix `d beta / d inputs` has one row per cell and one
//! column per input; pruned margins get zero columns.

mod chi2;
mod delta;
mod monte_carlo;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::loss::LossError;
use crate::problem::{Problem, ProblemError};
use crate::solver::SolverError;

pub use chi2::chi2_closed_form_covariance;
pub use delta::{delta_covariance, DENSE_KKT_LIMIT};
pub use monte_carlo::{monte_carlo_covariance, DrawPolicy, McOptions, McResult};

#[derive(Debug, Error)]
pub enum UqError {
    #[error("uncertainty propagation is not available: {0}")]
    Unsupported(String),
    #[error("the solution did not converge")]
    NotConverged,
    #[error("the KKT system is singular")]
    SingularKkt,
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("invalid covariance: {0}")]
    Covariance(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("draw {index} failed: {source}")]
    DrawSolveFailed { index: usize, source: Box<DrawFailure> },
    #[error("need at least 2 draws, got {0}")]
    TooFewDraws(usize),
    #[error("all {0} draws were rejected")]
    AllDrawsRejected(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Why a Monte Carlo draw could not be raked.
#[derive(Debug, Error)]
pub enum DrawFailure {
    #[error("drawn inputs are invalid: {0}")]
    Inputs(#[from] ProblemError),
    #[error(transparent)]
    Solve(#[from] SolverError),
}

/// Name of one input coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum InputLabel {
    /// Observation on the given cell.
    Observation(usize),
    /// Constraint margin, by its label in the problem.
    Margin(usize),
    /// Aggregate observation, by row of `B`.
    AggregateObservation(usize),
}

/// Labels for the input coordinates of a problem, in covariance order.
pub fn input_labels(problem: &Problem) -> Vec<InputLabel> {
    problem
        .observed()
        .iter()
        .map(|&c| InputLabel::Observation(c))
        .chain(problem.a_labels().iter().map(|&l| InputLabel::Margin(l)))
        .chain((0..problem.b().nrows()).map(InputLabel::AggregateObservation))
        .collect()
}

pub fn n_inputs(problem: &Problem) -> usize {
    problem.observed().len() + problem.a_full().nrows() + problem.b().nrows()
}

/// Current input values in covariance order.
pub fn input_values(problem: &Problem) -> Vec<f64> {
    problem.y().iter().chain(problem.s_full()).chain(problem.s_b()).copied().collect()
}

/// Covariance of the inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum InputCovariance {
    Full(DMatrix<f64>),
    /// Independent inputs with these variances.
    Diagonal(Vec<f64>),
}

impl InputCovariance {
    pub fn dim(&self) -> usize {
        match self {
            InputCovariance::Full(m) => m.nrows(),
            InputCovariance::Diagonal(d) => d.len(),
        }
    }

    /// Check shape, symmetry (1e-12 relative to the largest entry) and
    /// positive semi-definiteness (eigenvalues above -1e-10 relative).
    pub fn validate(&self, n: usize) -> Result<(), UqError> {
        if self.dim() != n {
            return Err(UqError::Covariance(format!("expected dimension {n}, got {}", self.dim())));
        }
        match self {
            InputCovariance::Diagonal(d) => {
                if let Some(v) = d.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                    return Err(UqError::Covariance(format!("variance {v} is not a finite non-negative number")));
                }
            }
            InputCovariance::Full(m) => {
                if m.ncols() != n {
                    return Err(UqError::Covariance("matrix is not square".into()));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(UqError::Covariance("non-finite entry".into()));
                }
                let scale = m.amax().max(f64::MIN_POSITIVE);
                for i in 0..n {
                    for j in 0..i {
                        if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                            return Err(UqError::Covariance(format!("not symmetric at ({i}, {j})")));
                        }
                    }
                }
                let min = m.clone().symmetric_eigenvalues().min();
                if min < -1e-10 * scale {
                    return Err(UqError::Covariance(format!("not positive semi-definite (eigenvalue {min:e})")));
                }
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            InputCovariance::Full(m) => m.clone(),
            InputCovariance::Diagonal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
        }
    }

    /// `J Sigma J^T`, symmetrised.
    pub fn sandwich(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        let out = match self {
            InputCovariance::Full(m) => j * m * j.transpose(),
            InputCovariance::Diagonal(d) => {
                let mut js = j.clone();
                for (c, v) in d.iter().enumerate() {
                    js.column_mut(c).scale_mut(*v);
                }
                js * j.transpose()
            }
        };
        (&out + out.transpose()) * 0.5
    }
}

/// Covariance of raked values with the sensitivity that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceResult {
    /// `p x p` covariance of the raked values.
    pub sigma_beta: DMatrix<f64>,
    /// `p x n_inputs` matrix of `d beta / d inputs`.
    pub sensitivity: DMatrix<f64>,
    pub labels: Vec<InputLabel>,
}

impl CovarianceResult {
    pub fn std_devs(&self) -> Vec<f64> {
        self.sigma_beta.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// A row or column of the sensitivity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityQuery {
    /// Influence of every input on one raked cell.
    Target(usize),
    /// Influence of one input on every raked cell.
    Source(usize),
}

pub fn sensitivity_query(result: &CovarianceResult, query: SensitivityQuery) -> Result<Vec<f64>, UqError> {
    let j = &result.sensitivity;
    match query {
        SensitivityQuery::Target(i) => {
            if i >= j.nrows() {
                return Err(UqError::IndexOutOfRange { index: i, len: j.nrows() });
            }
            Ok(j.row(i).iter().copied().collect())
        }
        SensitivityQuery::Source(c) => {
            if c >= j.ncols() {
                return Err(UqError::IndexOutOfRange { index: c, len: j.ncols() });
            }
            Ok(j.column(c).iter().copied().collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_validation() {
        assert!(InputCovariance::Diagonal(vec![1.0, 0.0]).validate(2).is_ok());
        assert!(InputCovariance::Diagonal(vec![1.0, -1.0]).validate(2).is_err());
        assert!(InputCovariance::Diagonal(vec![1.0]).validate(2).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(InputCovariance::Full(asym).validate(2).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(InputCovariance::Full(indef).validate(2).is_err());
        let psd = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(InputCovariance::Full(psd).validate(2).is_ok());
    }

    #[test]
    fn sandwich_diag_matches_dense() {
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
        let d = vec![0.5, 2.0, 1.5];
        let a = InputCovariance::Diagonal(d.clone()).sandwich(&j);
        let b = InputCovariance::Full(InputCovariance::Diagonal(d).to_dense()).sandwich(&j);
        assert!((a - b).amax() < 1e-14);
    }

    #[test]
    fn query_bounds() {
        let r = CovarianceResult {
            sigma_beta: DMatrix::zeros(2, 2),
            sensitivity: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            labels: Vec::new(),
        };
        assert_eq!(sensitivity_query(&r, SensitivityQuery::Target(1)).unwrap(), vec![4.0, 5.0, 6.0]);
        assert_eq!(sensitivity_query(&r, SensitivityQuery::Source(2)).unwrap(), vec![3.0, 6.0]);
        assert!(sensitivity_query(&r, SensitivityQuery::Source(3)).is_err());
    }
}
