//! Iterative proportional fitting for two-way tables.
//!
//! The raked table is `beta_ij = y_ij a_i b_j`. A row sweep sets each `a_i`
//! so that row `i` hits its total, a column sweep does the same for `b_j`.
//! This is exact block-coordinate descent on the entropic dual with
//! `lambda_r = -w log a` and `lambda_c = -w log b`.

use super::{Diagnostics, IterRecord, Path, Solution, SolverError, SolverOptions};
use crate::loss::LossKind;
use crate::problem::Problem;

/// Relative tolerance on `sum s_r = sum s_c`.
pub const IPF_CONSISTENCY_RTOL: f64 = 1e-8;

/// A two-way table with row and column totals. Cells are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWay {
    pub m: usize,
    pub n: usize,
    pub y: Vec<f64>,
    pub s_r: Vec<f64>,
    pub s_c: Vec<f64>,
    /// Common weight of every cell.
    pub w: f64,
    /// For each unpruned constraint of the source problem: `(is_row, index)`.
    layout: Vec<(bool, usize)>,
}

impl TwoWay {
    pub fn new(m: usize, n: usize, y: Vec<f64>, s_r: Vec<f64>, s_c: Vec<f64>) -> Self {
        let layout = (0..m).map(|i| (true, i)).chain((0..n).map(|j| (false, j))).collect();
        TwoWay { m, n, y, s_r, s_c, w: 1.0, layout }
    }

    /// Recognise a problem whose constraints are exactly the row and column
    /// totals of a 2D table (in any order).
    pub fn from_problem(problem: &Problem) -> Option<Self> {
        let shape = problem.shape()?;
        if shape.len() != 2 || problem.kind() != LossKind::Entropic || problem.has_missing() {
            return None;
        }
        let (m, n) = (shape[0], shape[1]);
        let a = problem.a_full();
        if a.nrows() != m + n {
            return None;
        }
        let mut s_r = vec![f64::NAN; m];
        let mut s_c = vec![f64::NAN; n];
        let mut layout = Vec::with_capacity(m + n);
        for (r, row) in a.rows().iter().enumerate() {
            let s = problem.s_full()[r];
            if row.len() == n && row[0] % n == 0 && row.iter().enumerate().all(|(j, &c)| c == row[0] + j) {
                let i = row[0] / n;
                if !s_r[i].is_nan() {
                    return None;
                }
                s_r[i] = s;
                layout.push((true, i));
            } else if row.len() == m && row[0] < n && row.iter().enumerate().all(|(i, &c)| c == row[0] + i * n) {
                let j = row[0];
                if !s_c[j].is_nan() {
                    return None;
                }
                s_c[j] = s;
                layout.push((false, j));
            } else {
                return None;
            }
        }
        if m == 1 || n == 1 {
            // a row or column total would then cover the same cells twice
            return None;
        }
        Some(TwoWay { m, n, y: problem.y().to_vec(), s_r, s_c, w: problem.loss().weights()[0], layout })
    }

    /// Translate multipliers into the retained-constraint order of the
    /// source problem. The row/column split has one free shift, chosen so
    /// that the pruned constraint's multiplier is zero.
    pub fn into_problem_order(&self, problem: &Problem, mut sol: Solution) -> Solution {
        let (lr, lc) = sol.lambda.split_at(self.m);
        let mut shift = 0.0;
        if let Some(&d) = problem.dropped().first() {
            shift = match self.layout[d] {
                (true, i) => -lr[i],
                (false, j) => lc[j],
            };
        }
        sol.lambda = problem
            .retained()
            .iter()
            .map(|&r| match self.layout[r] {
                (true, i) => lr[i] + shift,
                (false, j) => lc[j] - shift,
            })
            .collect();
        sol
    }
}

pub fn solve_ipf_2d(tw: &TwoWay, opts: &SolverOptions) -> Result<Solution, SolverError> {
    let (m, n) = (tw.m, tw.n);
    let y = &tw.y;
    for (index, &value) in y.iter().chain(&tw.s_r).chain(&tw.s_c).enumerate() {
        if !(value > 0.0) {
            return Err(SolverError::NonPositiveInput { index, value });
        }
    }
    let (tr, tc): (f64, f64) = (tw.s_r.iter().sum(), tw.s_c.iter().sum());
    if (tr - tc).abs() > IPF_CONSISTENCY_RTOL * tr.abs().max(tc.abs()) {
        return Err(SolverError::InconsistentMargins { rows: tr, cols: tc });
    }
    let scale = tw.s_r.iter().chain(&tw.s_c).fold(1f64, |a, b| a.max(b.abs()));
    let mut a = vec![1.0; m];
    let mut b = vec![1.0; n];
    let mut matvecs = 0u64;
    let mut trace = Vec::new();

    let record = |a: &[f64], b: &[f64], matvecs: u64, it: usize, trace: &mut Vec<IterRecord>| {
        let (obj, viol) = objective_and_violation(tw, a, b);
        trace.push(IterRecord {
            iteration: it,
            matvecs,
            dual_objective: obj,
            grad_inf: viol,
            max_violation: viol,
            step: 1.0,
            krylov_iterations: 0,
        });
        viol
    };
    let mut viol = record(&a, &b, matvecs, 0, &mut trace);
    let mut sweeps = 0;
    while viol > opts.grad_tol * scale && sweeps < opts.ipf_max_sweeps {
        sweeps += 1;
        if sweeps % 2 == 1 {
            for i in 0..m {
                let rs: f64 = (0..n).map(|j| y[i * n + j] * b[j]).sum();
                a[i] = tw.s_r[i] / rs;
            }
        } else {
            let mut cs = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    cs[j] += y[i * n + j] * a[i];
                }
            }
            for j in 0..n {
                b[j] = tw.s_c[j] / cs[j];
            }
        }
        matvecs += 1;
        viol = record(&a, &b, matvecs, sweeps, &mut trace);
    }
    // the violation is the dual gradient, so the Newton test applies; a
    // sweep budget exhausted close to it still counts
    let converged = viol <= opts.cons_tol * scale;
    let beta: Vec<f64> = (0..m * n).map(|c| y[c] * a[c / n] * b[c % n]).collect();
    let lambda: Vec<f64> = a.iter().chain(&b).map(|v| -tw.w * v.ln()).collect();
    let last = *trace.last().expect("at least the initial record");
    let sol = Solution {
        recovered: vec![false; m * n],
        beta,
        lambda,
        zeta: Vec::new(),
        diagnostics: Diagnostics {
            path: Path::Ipf2d,
            converged,
            outer_iterations: sweeps,
            matvecs,
            dual_objective: last.dual_objective,
            grad_inf: viol,
            max_violation: viol,
            trace,
        },
    };
    if !converged {
        return Err(SolverError::NoConvergence {
            path: Path::Ipf2d,
            iterations: sweeps,
            grad_inf: viol,
            max_violation: viol,
            partial: Box::new(sol),
        });
    }
    Ok(sol)
}

fn objective_and_violation(tw: &TwoWay, a: &[f64], b: &[f64]) -> (f64, f64) {
    let (m, n) = (tw.m, tw.n);
    let mut rows = vec![0.0; m];
    let mut cols = vec![0.0; n];
    let mut excess = 0.0;
    for i in 0..m {
        for j in 0..n {
            let y = tw.y[i * n + j];
            let beta = y * a[i] * b[j];
            rows[i] += beta;
            cols[j] += beta;
            excess += beta - y;
        }
    }
    let mut obj = tw.w * excess;
    obj -= tw.w * a.iter().zip(&tw.s_r).map(|(a, s)| a.ln() * s).sum::<f64>();
    obj -= tw.w * b.iter().zip(&tw.s_c).map(|(b, s)| b.ln() * s).sum::<f64>();
    let viol = rows.iter().zip(&tw.s_r).chain(cols.iter().zip(&tw.s_c)).fold(0.0f64, |v, (x, s)| v.max((x - s).abs()));
    (obj, viol)
}
