//! 0/1 aggregation operators.
//!
//! A margin is the sum of a set of cells, so an operator is stored as one
//! sorted index list per row. `apply` gathers, `apply_transpose` scatters, and
//! [`Stack::hvp`] evaluates `[A; B] diag(S) [A; B]^T x` without forming the
//! Hessian. All reductions run in ascending index order.

use std::cell::Cell;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinopError {
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dense materialisation of a {rows}x{cols} operator exceeds the cap of {cap} entries")]
    TooLarge { rows: usize, cols: usize, cap: usize },
    #[error("row {row} references column {col} but the operator has {ncols} columns")]
    IndexOutOfRange { row: usize, col: usize, ncols: usize },
}

/// Default cap on `rows * cols` for [`AggOperator::assemble_dense`].
pub const DENSE_CAP: usize = 1_000_000;

/// Sparse 0/1 operator, one sorted member list per row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AggOperator {
    rows: Vec<Vec<usize>>,
    ncols: usize,
}

impl AggOperator {
    pub fn new(mut rows: Vec<Vec<usize>>, ncols: usize) -> Result<Self, LinopError> {
        for (r, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&col) = row.last() {
                if col >= ncols {
                    return Err(LinopError::IndexOutOfRange { row: r, col, ncols });
                }
            }
        }
        Ok(AggOperator { rows, ncols })
    }

    pub fn empty(ncols: usize) -> Self {
        AggOperator { rows: Vec::new(), ncols }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Self {
        AggOperator { rows: keep.iter().map(|&r| self.rows[r].clone()).collect(), ncols: self.ncols }
    }

    /// Restrict to a subset of columns, renumbered in the order of `cols`.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            map[old] = new;
        }
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut r: Vec<usize> = row.iter().filter_map(|&c| (map[c] != usize::MAX).then_some(map[c])).collect();
                r.sort_unstable();
                r
            })
            .collect();
        AggOperator { rows, ncols: cols.len() }
    }

    /// `out = A x`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), LinopError> {
        check(self.ncols, x.len())?;
        check(self.nrows(), out.len())?;
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&c| x[c]).sum();
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, LinopError> {
        let mut out = vec![0.0; self.nrows()];
        self.apply_into(x, &mut out)?;
        Ok(out)
    }

    /// `out += A^T u`.
    pub fn apply_transpose_add(&self, u: &[f64], out: &mut [f64]) -> Result<(), LinopError> {
        check(self.nrows(), u.len())?;
        check(self.ncols, out.len())?;
        for (row, &ur) in self.rows.iter().zip(u) {
            if ur != 0.0 {
                for &c in row {
                    out[c] += ur;
                }
            }
        }
        Ok(())
    }

    pub fn apply_transpose(&self, u: &[f64]) -> Result<Vec<f64>, LinopError> {
        let mut out = vec![0.0; self.ncols];
        self.apply_transpose_add(u, &mut out)?;
        Ok(out)
    }

    pub fn assemble_dense(&self) -> Result<DMatrix<f64>, LinopError> {
        self.assemble_dense_capped(DENSE_CAP)
    }

    pub fn assemble_dense_capped(&self, cap: usize) -> Result<DMatrix<f64>, LinopError> {
        let (rows, cols) = (self.nrows(), self.ncols);
        if rows.saturating_mul(cols) > cap {
            return Err(LinopError::TooLarge { rows, cols, cap });
        }
        let mut m = DMatrix::zeros(rows, cols);
        for (r, row) in self.rows.iter().enumerate() {
            for &c in row {
                m[(r, c)] = 1.0;
            }
        }
        Ok(m)
    }
}

fn check(expected: usize, got: usize) -> Result<(), LinopError> {
    if expected != got {
        return Err(LinopError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Work counters for a [`Stack`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpStats {
    /// Hessian-vector products.
    pub hvps: u64,
    /// Forward or adjoint applications of the stacked operator.
    pub applies: u64,
    /// Floating point additions and multiplications.
    pub flops: u64,
}

/// The vertical stack `[A; B]` of two operators sharing columns.
#[derive(Debug)]
pub struct Stack<'a> {
    pub a: &'a AggOperator,
    pub b: &'a AggOperator,
    stats: Cell<OpStats>,
}

impl<'a> Stack<'a> {
    pub fn new(a: &'a AggOperator, b: &'a AggOperator) -> Result<Self, LinopError> {
        check(a.ncols(), b.ncols())?;
        Ok(Stack { a, b, stats: Cell::new(OpStats::default()) })
    }

    pub fn nrows(&self) -> usize {
        self.a.nrows() + self.b.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.a.ncols()
    }

    pub fn nnz(&self) -> usize {
        self.a.nnz() + self.b.nnz()
    }

    pub fn stats(&self) -> OpStats {
        self.stats.get()
    }

    fn bump(&self, hvps: u64, applies: u64, flops: u64) {
        let mut s = self.stats.get();
        s.hvps += hvps;
        s.applies += applies;
        s.flops += flops;
        self.stats.set(s);
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), LinopError> {
        check(self.nrows(), out.len())?;
        let (oa, ob) = out.split_at_mut(self.a.nrows());
        self.a.apply_into(x, oa)?;
        self.b.apply_into(x, ob)?;
        self.bump(0, 1, self.nnz() as u64);
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, LinopError> {
        let mut out = vec![0.0; self.nrows()];
        self.apply_into(x, &mut out)?;
        Ok(out)
    }

    /// `out = [A; B]^T u`.
    pub fn apply_transpose_into(&self, u: &[f64], out: &mut [f64]) -> Result<(), LinopError> {
        check(self.nrows(), u.len())?;
        out.iter_mut().for_each(|o| *o = 0.0);
        let (ua, ub) = u.split_at(self.a.nrows());
        self.a.apply_transpose_add(ua, out)?;
        self.b.apply_transpose_add(ub, out)?;
        self.bump(0, 1, self.nnz() as u64);
        Ok(())
    }

    pub fn apply_transpose(&self, u: &[f64]) -> Result<Vec<f64>, LinopError> {
        let mut out = vec![0.0; self.ncols()];
        self.apply_transpose_into(u, &mut out)?;
        Ok(out)
    }

    /// `[A; B] diag(s) [A; B]^T x`, matrix-free.
    pub fn hvp(&self, s_diag: &[f64], x: &[f64]) -> Result<Vec<f64>, LinopError> {
        let mut out = vec![0.0; self.nrows()];
        let mut work = vec![0.0; self.ncols()];
        self.hvp_into(s_diag, x, &mut work, &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant of [`Stack::hvp`]; `work` has length `ncols`.
    pub fn hvp_into(&self, s_diag: &[f64], x: &[f64], work: &mut [f64], out: &mut [f64]) -> Result<(), LinopError> {
        check(self.ncols(), s_diag.len())?;
        check(self.nrows(), x.len())?;
        check(self.ncols(), work.len())?;
        check(self.nrows(), out.len())?;
        work.iter_mut().for_each(|w| *w = 0.0);
        let (xa, xb) = x.split_at(self.a.nrows());
        self.a.apply_transpose_add(xa, work)?;
        self.b.apply_transpose_add(xb, work)?;
        for (w, &s) in work.iter_mut().zip(s_diag) {
            *w *= s;
        }
        let (oa, ob) = out.split_at_mut(self.a.nrows());
        self.a.apply_into(work, oa)?;
        self.b.apply_into(work, ob)?;
        self.bump(1, 0, 2 * self.nnz() as u64 + self.ncols() as u64);
        Ok(())
    }

    /// Diagonal of `[A; B] diag(s) [A; B]^T`.
    pub fn hessian_diag(&self, s_diag: &[f64]) -> Vec<f64> {
        self.a.rows().iter().chain(self.b.rows()).map(|row| row.iter().map(|&c| s_diag[c]).sum()).collect()
    }

    pub fn assemble_dense(&self) -> Result<DMatrix<f64>, LinopError> {
        let (rows, cols) = (self.nrows(), self.ncols());
        if rows.saturating_mul(cols) > DENSE_CAP {
            return Err(LinopError::TooLarge { rows, cols, cap: DENSE_CAP });
        }
        let mut m = DMatrix::zeros(rows, cols);
        for (r, row) in self.a.rows().iter().chain(self.b.rows()).enumerate() {
            for &c in row {
                m[(r, c)] = 1.0;
            }
        }
        Ok(m)
    }
}

/// Row and column sums of an `m x n` table stored with the column index
/// fastest (`beta[i * n + j]`). Rows first, then columns.
pub fn two_way_margins(m: usize, n: usize) -> AggOperator {
    let mut rows = Vec::with_capacity(m + n);
    for i in 0..m {
        rows.push((0..n).map(|j| i * n + j).collect());
    }
    for j in 0..n {
        rows.push((0..m).map(|i| i * n + j).collect());
    }
    AggOperator { rows, ncols: m * n }
}
