//! A compiled raking instance.
//!
//! Cells are numbered `0..p`. Some of them carry observations (the loss is
//! defined on those) and the rest are missing. Aggregates come in two kinds:
//! hard constraints `A beta = s` and noisy aggregate observations `B beta ~ s_b`
//! that enter through their own loss term.

use thiserror::Error;

use crate::dense::{greedy_row_basis, sigma_max_estimate};
use crate::linop::{AggOperator, LinopError, Stack};
use crate::loss::{Loss, LossError, LossKind};

/// Relative rank tolerance used when pruning constraint rows.
pub const PRUNE_RANK_RTOL: f64 = 1e-10;
/// Relative tolerance for the margin of a redundant constraint row.
pub const PRUNE_CONSISTENCY_RTOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("problem has no cells")]
    EmptyProblem,
    #[error("invalid loss data: {0}")]
    Loss(#[from] LossError),
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error("{what}: expected length {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("observed index {index} is out of range or not strictly increasing")]
    ObservedIndex { index: usize },
    #[error("logistic loss requires lower and upper bounds")]
    MissingBounds,
    #[error(
        "constraint {row} is implied by constraints {depends_on:?} which give {implied}, \
         but its margin is {given}"
    )]
    InconsistentMargins { row: usize, depends_on: Vec<usize>, implied: f64, given: f64 },
}

/// Uncompiled description of a problem, with public fields.
///
/// `y`, `w`, `lower` and `upper` are indexed by observed cell, in the order
/// of `observed` (or of all cells when `observed` is `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub p: usize,
    pub kind: LossKind,
    pub observed: Option<Vec<usize>>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub a: AggOperator,
    pub s: Vec<f64>,
    pub b: AggOperator,
    pub s_b: Vec<f64>,
    pub w_b: Vec<f64>,
    pub b_lower: Option<Vec<f64>>,
    pub b_upper: Option<Vec<f64>>,
    /// Names for the rows of `a` used in error messages; defaults to `0..k`.
    pub a_labels: Option<Vec<usize>>,
    /// Table shape, if the cells come from a Cartesian product.
    pub shape: Option<Vec<usize>>,
    /// Skip pruning; the caller guarantees `a` has full row rank.
    pub full_rank: bool,
}

impl ProblemSpec {
    /// Fully observed cells with unit weights and only hard constraints.
    pub fn new(kind: LossKind, y: Vec<f64>, a: AggOperator, s: Vec<f64>) -> Self {
        let p = y.len();
        ProblemSpec {
            p,
            kind,
            observed: None,
            w: vec![1.0; p],
            y,
            lower: None,
            upper: None,
            b: AggOperator::empty(a.ncols()),
            a,
            s,
            s_b: Vec::new(),
            w_b: Vec::new(),
            b_lower: None,
            b_upper: None,
            a_labels: None,
            shape: None,
            full_rank: false,
        }
    }

    pub fn weights(mut self, w: Vec<f64>) -> Self {
        self.w = w;
        self
    }

    pub fn bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    pub fn shape(mut self, shape: Vec<usize>) -> Self {
        self.shape = Some(shape);
        self
    }

    /// Aggregate observations with values `s_b` and weights `w_b`.
    pub fn aggregate_observations(mut self, b: AggOperator, s_b: Vec<f64>, w_b: Vec<f64>) -> Self {
        self.b = b;
        self.s_b = s_b;
        self.w_b = w_b;
        self
    }

    pub fn aggregate_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.b_lower = Some(lower);
        self.b_upper = Some(upper);
        self
    }

    /// Mark only `observed` cells as carrying data; `y` and `w` must then be
    /// given for those cells only.
    pub fn observed(mut self, observed: Vec<usize>, p: usize) -> Self {
        self.observed = Some(observed);
        self.p = p;
        self
    }

    /// Declare the constraints linearly independent so compilation skips the
    /// dense rank check. Needed for tables too large for it.
    pub fn full_rank(mut self) -> Self {
        self.full_rank = true;
        self
    }

    pub fn compile(self) -> Result<Problem, ProblemError> {
        Problem::new(self)
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    p: usize,
    shape: Option<Vec<usize>>,
    observed: Vec<usize>,
    missing: Vec<usize>,
    loss: Loss,
    loss_b: Option<Loss>,
    a: AggOperator,
    s: Vec<f64>,
    a_full: AggOperator,
    s_full: Vec<f64>,
    a_labels: Vec<usize>,
    retained: Vec<usize>,
    dropped: Vec<usize>,
    /// For each dropped row, its coefficients over the retained rows.
    implied: Vec<Vec<f64>>,
    b: AggOperator,
    a_obs: AggOperator,
    b_obs: AggOperator,
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self, ProblemError> {
        let full_rank = spec.full_rank;
        let mut problem = Self::assemble(spec)?;
        let (retained, dropped, implied) = if full_rank {
            ((0..problem.a_full.nrows()).collect(), Vec::new(), Vec::new())
        } else {
            prune(&problem.a_full, &problem.s_full, &problem.a_labels)?
        };
        problem.a = problem.a_full.select_rows(&retained);
        problem.s = retained.iter().map(|&r| problem.s_full[r]).collect();
        problem.a_obs = problem.a.select_cols(&problem.observed);
        problem.retained = retained;
        problem.dropped = dropped;
        problem.implied = implied;
        Ok(problem)
    }

    fn assemble(spec: ProblemSpec) -> Result<Self, ProblemError> {
        let p = spec.p;
        if p == 0 {
            return Err(ProblemError::EmptyProblem);
        }
        let observed = match spec.observed {
            Some(obs) => {
                for (i, &o) in obs.iter().enumerate() {
                    if o >= p || (i > 0 && obs[i - 1] >= o) {
                        return Err(ProblemError::ObservedIndex { index: o });
                    }
                }
                obs
            }
            None => (0..p).collect(),
        };
        let mut is_obs = vec![false; p];
        observed.iter().for_each(|&o| is_obs[o] = true);
        let missing: Vec<usize> = (0..p).filter(|&i| !is_obs[i]).collect();
        let n_obs = observed.len();
        length("y", n_obs, spec.y.len())?;
        length("w", n_obs, spec.w.len())?;
        length("A columns", p, spec.a.ncols())?;
        length("B columns", p, spec.b.ncols())?;
        length("s", spec.a.nrows(), spec.s.len())?;
        length("s_b", spec.b.nrows(), spec.s_b.len())?;
        length("w_b", spec.b.nrows(), spec.w_b.len())?;
        let loss = make_loss(spec.kind, spec.y, spec.w, spec.lower, spec.upper)?;
        let loss_b = if spec.b.nrows() == 0 {
            None
        } else {
            Some(make_loss(spec.kind, spec.s_b, spec.w_b, spec.b_lower, spec.b_upper)?)
        };
        let a_labels = match spec.a_labels {
            Some(l) => {
                length("a_labels", spec.a.nrows(), l.len())?;
                l
            }
            None => (0..spec.a.nrows()).collect(),
        };
        let k = spec.a.nrows();
        Ok(Problem {
            p,
            shape: spec.shape,
            a_obs: spec.a.select_cols(&observed),
            b_obs: spec.b.select_cols(&observed),
            observed,
            missing,
            loss,
            loss_b,
            a: spec.a.clone(),
            s: spec.s.clone(),
            a_full: spec.a,
            s_full: spec.s,
            a_labels,
            retained: (0..k).collect(),
            dropped: Vec::new(),
            implied: Vec::new(),
            b: spec.b,
        })
    }

    /// Same structure with new observation values, retained margins and
    /// aggregate-observation values. Pruning is not repeated; each dropped
    /// row takes the margin implied by the new retained ones.
    pub fn with_inputs(&self, y: &[f64], s: &[f64], s_b: &[f64]) -> Result<Self, ProblemError> {
        length("y", self.observed.len(), y.len())?;
        length("s", self.a.nrows(), s.len())?;
        length("s_b", self.b.nrows(), s_b.len())?;
        let mut out = self.clone();
        out.loss = self.loss.with_reference(y.to_vec())?;
        if let Some(lb) = &self.loss_b {
            out.loss_b = Some(lb.with_reference(s_b.to_vec())?);
        }
        out.s = s.to_vec();
        for (&r, &v) in self.retained.iter().zip(s) {
            out.s_full[r] = v;
        }
        for (&r, coef) in self.dropped.iter().zip(&self.implied) {
            out.s_full[r] = coef.iter().zip(s).map(|(c, v)| c * v).sum();
        }
        Ok(out)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn shape(&self) -> Option<&[usize]> {
        self.shape.as_deref()
    }

    pub fn kind(&self) -> LossKind {
        self.loss.kind()
    }

    /// Loss on the observed cells.
    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    /// Loss on the aggregate observations, if any.
    pub fn loss_b(&self) -> Option<&Loss> {
        self.loss_b.as_ref()
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    pub fn has_missing(&self) -> bool {
        !self.missing.is_empty()
    }

    /// Observation values, aligned with [`Problem::observed`].
    pub fn y(&self) -> &[f64] {
        self.loss.reference()
    }

    /// Pruned constraint operator over all cells.
    pub fn a(&self) -> &AggOperator {
        &self.a
    }

    /// Margins of the pruned constraints.
    pub fn s(&self) -> &[f64] {
        &self.s
    }

    /// Constraint operator before pruning.
    pub fn a_full(&self) -> &AggOperator {
        &self.a_full
    }

    pub fn s_full(&self) -> &[f64] {
        &self.s_full
    }

    pub fn a_labels(&self) -> &[usize] {
        &self.a_labels
    }

    /// Indices into the unpruned constraints that were kept.
    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// Indices into the unpruned constraints that were dropped as redundant.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn b(&self) -> &AggOperator {
        &self.b
    }

    pub fn s_b(&self) -> &[f64] {
        self.loss_b.as_ref().map(Loss::reference).unwrap_or(&[])
    }

    /// Pruned constraints restricted to the observed cells.
    pub fn a_obs(&self) -> &AggOperator {
        &self.a_obs
    }

    /// Aggregate observations restricted to the observed cells.
    pub fn b_obs(&self) -> &AggOperator {
        &self.b_obs
    }

    /// Scatter observed-cell values into a length-`p` vector, filling missing
    /// cells with `fill`.
    pub fn scatter_observed(&self, values: &[f64], fill: f64) -> Vec<f64> {
        let mut out = vec![fill; self.p];
        for (&i, &v) in self.observed.iter().zip(values) {
            out[i] = v;
        }
        out
    }
}

fn length(what: &'static str, expected: usize, got: usize) -> Result<(), ProblemError> {
    if expected != got {
        return Err(ProblemError::Length { what, expected, got });
    }
    Ok(())
}

fn make_loss(
    kind: LossKind,
    y: Vec<f64>,
    w: Vec<f64>,
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
) -> Result<Loss, ProblemError> {
    match kind {
        LossKind::Logistic => match (lower, upper) {
            (Some(l), Some(u)) => Ok(Loss::logistic(y, w, l, u)?),
            _ => Err(ProblemError::MissingBounds),
        },
        _ => Ok(Loss::new(kind, y, w)?),
    }
}

/// Drop linearly dependent constraint rows, greedily in input order.
///
/// Returns the retained and dropped row indices. The rank decision uses
/// `1e-10` times an estimate of the largest singular value. A dropped row's
/// margin must match the value implied by the retained rows to `1e-8`
/// relative, otherwise the margins contradict each other.
pub fn prune_constraints(
    a: &AggOperator,
    s: &[f64],
    labels: &[usize],
) -> Result<(Vec<usize>, Vec<usize>), ProblemError> {
    prune(a, s, labels).map(|(kept, dropped, _)| (kept, dropped))
}

type Pruned = (Vec<usize>, Vec<usize>, Vec<Vec<f64>>);

fn prune(a: &AggOperator, s: &[f64], labels: &[usize]) -> Result<Pruned, ProblemError> {
    length("s", a.nrows(), s.len())?;
    if a.nrows() == 0 {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    }
    let empty = AggOperator::empty(a.ncols());
    let stack = Stack::new(a, &empty)?;
    let tol = PRUNE_RANK_RTOL * sigma_max_estimate(&stack, 50).max(1.0);
    let rows: Vec<Vec<f64>> = a
        .rows()
        .iter()
        .map(|r| {
            let mut v = vec![0.0; a.ncols()];
            r.iter().for_each(|&c| v[c] = 1.0);
            v
        })
        .collect();
    let basis = greedy_row_basis(&rows, tol);
    for (row, coef) in &basis.dropped {
        let mut implied = 0.0;
        let mut scale = s[*row].abs();
        let mut depends_on = Vec::new();
        for (&k, &c) in basis.kept.iter().zip(coef) {
            implied += c * s[k];
            scale += (c * s[k]).abs();
            if c.abs() > 1e-12 {
                depends_on.push(labels[k]);
            }
        }
        if (implied - s[*row]).abs() > PRUNE_CONSISTENCY_RTOL * scale.max(f64::MIN_POSITIVE) {
            return Err(ProblemError::InconsistentMargins { row: labels[*row], depends_on, implied, given: s[*row] });
        }
    }
    let (dropped, implied) = basis.dropped.into_iter().unzip();
    Ok((basis.kept, dropped, implied))
}
