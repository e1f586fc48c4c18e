//! Small dense linear-algebra helpers: greedy row bases, null spaces and
//! least squares with a rank report.

use nalgebra::{DMatrix, DVector};

use crate::linop::Stack;

/// Result of a greedy modified Gram-Schmidt pass over a list of rows.
#[derive(Debug, Clone)]
pub struct RowBasis {
    /// Indices of rows kept as independent, in input order.
    pub kept: Vec<usize>,
    /// For each dropped row, its index and the coefficients expressing it as
    /// a combination of the kept rows (aligned with `kept`).
    pub dropped: Vec<(usize, Vec<f64>)>,
}

/// Greedy row selection in input order.
///
/// A row is dropped when the norm of its component orthogonal to the rows
/// already kept is at most `tol`. Two orthogonalisation passes are used.
pub fn greedy_row_basis(rows: &[Vec<f64>], tol: f64) -> RowBasis {
    let mut q: Vec<Vec<f64>> = Vec::new();
    // l[i] holds the coefficients of kept row i in the basis q[0..=i]
    let mut l: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (idx, row) in rows.iter().enumerate() {
        let mut v = row.clone();
        let mut h = vec![0.0; q.len()];
        for _ in 0..2 {
            for (j, qj) in q.iter().enumerate() {
                let c = dot(qj, &v);
                h[j] += c;
                axpy(-c, qj, &mut v);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > tol {
            v.iter_mut().for_each(|x| *x /= nrm);
            q.push(v);
            h.push(nrm);
            l.push(h);
            kept.push(idx);
        } else {
            // row = h^T Q and kept rows = L Q, so row = (L^{-T} h)^T (kept rows)
            dropped.push((idx, solve_upper_from_lower_transpose(&l, &h)));
        }
    }
    RowBasis { kept, dropped }
}

/// Solve `L^T c = h` where `L` is lower triangular and stored by rows.
fn solve_upper_from_lower_transpose(l: &[Vec<f64>], h: &[f64]) -> Vec<f64> {
    let n = h.len();
    let mut c = h.to_vec();
    for i in (0..n).rev() {
        let mut acc = c[i];
        for (k, lk) in l.iter().enumerate().skip(i + 1) {
            acc -= lk[i] * c[k];
        }
        c[i] = acc / l[i][i];
    }
    c
}

/// Largest singular value of the stacked operator, by power iteration on
/// `[A; B][A; B]^T`.
pub fn sigma_max_estimate(stack: &Stack<'_>, iters: usize) -> f64 {
    let k = stack.nrows();
    if k == 0 || stack.nnz() == 0 {
        return 0.0;
    }
    let ones = vec![1.0; stack.ncols()];
    // deterministic start with distinct entries so it is not orthogonal to the top vector
    let mut x: Vec<f64> = (0..k).map(|i| 1.0 + (i as f64 * 0.618_033_988_7).fract()).collect();
    let mut lam = 0.0;
    for _ in 0..iters {
        let nrm = dot(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v /= nrm);
        let y = stack.hvp(&ones, &x).expect("dimensions fixed by construction");
        lam = dot(&x, &y);
        x = y;
    }
    lam.max(0.0).sqrt()
}

/// Orthonormal basis (as columns) of the null space of `c`, completing an
/// orthonormal basis of its row space with coordinate vectors.
pub fn null_space(c: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = c.ncols();
    let rows: Vec<Vec<f64>> = c.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut q: Vec<Vec<f64>> = Vec::new();
    for row in &rows {
        let mut v = row.clone();
        for _ in 0..2 {
            for qj in &q {
                let a = dot(qj, &v);
                axpy(-a, qj, &mut v);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        if nrm > tol {
            v.iter_mut().for_each(|x| *x /= nrm);
            q.push(v);
        }
    }
    let rank = q.len();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        if q.len() == n {
            break;
        }
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        for _ in 0..2 {
            for qj in &q {
                let a = dot(qj, &v);
                axpy(-a, qj, &mut v);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        // a coordinate vector keeps at least 1/sqrt(n) of its norm for some i
        if nrm > 0.5 / (n as f64).sqrt() {
            v.iter_mut().for_each(|x| *x /= nrm);
            q.push(v.clone());
            basis.push(v);
        }
    }
    debug_assert_eq!(basis.len(), n - rank);
    let mut m = DMatrix::zeros(n, basis.len());
    for (j, v) in basis.iter().enumerate() {
        m.set_column(j, &DVector::from_column_slice(v));
    }
    m
}

/// Minimum-norm least-squares solution of `x b = g` plus a per-unknown flag
/// saying whether that unknown is determined by the system.
///
/// Singular values below `rtol * sigma_max` are treated as zero. Unknown `j`
/// is identifiable when the numerical null space has no component along it.
pub fn least_squares_identified(x: &DMatrix<f64>, g: &DVector<f64>, rtol: f64) -> (DVector<f64>, Vec<bool>) {
    let n = x.ncols();
    if n == 0 {
        return (DVector::zeros(0), Vec::new());
    }
    // pad so the thin SVD exposes all n right singular vectors
    let rows = x.nrows().max(n);
    let mut xp = DMatrix::zeros(rows, n);
    xp.view_mut((0, 0), (x.nrows(), n)).copy_from(x);
    let mut gp = DVector::zeros(rows);
    gp.rows_mut(0, g.len()).copy_from(g);
    let svd = xp.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = rtol * smax.max(f64::MIN_POSITIVE);
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let mut sol = DVector::zeros(n);
    let mut null_weight = vec![0.0; n];
    for (k, &sk) in svd.singular_values.iter().enumerate() {
        let vk = vt.row(k);
        if sk > tol {
            let coef = u.column(k).dot(&gp) / sk;
            for j in 0..n {
                sol[j] += coef * vk[j];
            }
        } else {
            for j in 0..n {
                null_weight[j] += vk[j] * vk[j];
            }
        }
    }
    let identified = null_weight.iter().map(|&w| w.sqrt() <= 1e-8).collect();
    (sol, identified)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
