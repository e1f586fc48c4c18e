use std::path::PathBuf;

use rakekit::problem::ProblemError;
use rakekit::solver::SolverError;
use rakekit::table::TableError;
use rakekit::uq::UqError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error("unknown experiment `{0}` (expected one of {names})", names = crate::experiments::NAMES.join(", "))]
    UnknownExperiment(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for bad input, 2 when the numerics failed on valid input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(
                SolverError::InvalidOptions(_)
                | SolverError::UnknownPath(_)
                | SolverError::PathNotApplicable { .. }
                | SolverError::NonPositiveInput { .. }
                | SolverError::InconsistentMargins { .. }
                | SolverError::MissingUnrecoverable { .. },
            ) => 1,
            CliError::Solver(_) => 2,
            CliError::Uq(
                UqError::NotConverged
                | UqError::SingularKkt
                | UqError::SingularSystem(_)
                | UqError::DrawSolveFailed { .. }
                | UqError::AllDrawsRejected(_),
            ) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
