//! Preconditioned MINRES for symmetric systems.

/// Outcome of a MINRES run.
#[derive(Debug, Clone)]
pub struct MinresResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final preconditioned residual estimate relative to the right-hand side.
    pub rel_residual: f64,
    pub converged: bool,
    /// The preconditioner turned out indefinite or a quantity became non-finite.
    pub breakdown: bool,
}

/// Solve `H x = b` for symmetric `H` given as a closure.
///
/// `m_inv` is the diagonal of the inverse preconditioner, which must be
/// positive. Iteration stops once the residual estimate falls below
/// `rtol * ||b||_M` or after `maxit` products.
pub fn minres<F>(mut op: F, b: &[f64], m_inv: Option<&[f64]>, rtol: f64, maxit: usize) -> MinresResult
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let precond = |r: &[f64]| -> Vec<f64> {
        match m_inv {
            Some(m) => r.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => r.to_vec(),
        }
    };
    let mut x = vec![0.0; n];
    let mut r1 = b.to_vec();
    let mut y = precond(&r1);
    let beta1_sq = dot(&r1, &y);
    if !beta1_sq.is_finite() || beta1_sq < 0.0 {
        return MinresResult { x, iterations: 0, rel_residual: f64::NAN, converged: false, breakdown: true };
    }
    if beta1_sq == 0.0 {
        return MinresResult { x, iterations: 0, rel_residual: 0.0, converged: true, breakdown: false };
    }
    let beta1 = beta1_sq.sqrt();
    let mut r2 = r1.clone();
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut iterations = 0;
    while iterations < maxit {
        iterations += 1;
        let s = 1.0 / beta;
        let v: Vec<f64> = y.iter().map(|t| s * t).collect();
        y = op(&v);
        if iterations >= 2 {
            let c = beta / oldb;
            y.iter_mut().zip(&r1).for_each(|(yi, ri)| *yi -= c * ri);
        }
        let alfa = dot(&v, &y);
        let c = alfa / beta;
        y.iter_mut().zip(&r2).for_each(|(yi, ri)| *yi -= c * ri);
        r1 = std::mem::replace(&mut r2, y);
        y = precond(&r2);
        oldb = beta;
        let beta_sq = dot(&r2, &y);
        if !beta_sq.is_finite() || beta_sq < 0.0 || !alfa.is_finite() {
            return MinresResult { x, iterations, rel_residual: f64::NAN, converged: false, breakdown: true };
        }
        beta = beta_sq.sqrt();

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        let w1 = std::mem::replace(&mut w2, std::mem::take(&mut w));
        w = v.iter().zip(&w1).zip(&w2).map(|((vi, a), b)| (vi - oldeps * a - delta * b) * denom).collect();
        x.iter_mut().zip(&w).for_each(|(xi, wi)| *xi += phi * wi);

        let rel = phibar / beta1;
        if rel <= rtol || beta == 0.0 {
            return MinresResult { x, iterations, rel_residual: rel, converged: true, breakdown: false };
        }
    }
    let rel = phibar / beta1;
    MinresResult { x, iterations, rel_residual: rel, converged: rel <= rtol, breakdown: false }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let g = DMatrix::from_fn(n, n, |_, _| next());
        &g * g.transpose() + DMatrix::from_fn(n, n, |i, j| if i == j { 0.1 * (1 + i) as f64 } else { 0.0 })
    }

    #[test]
    fn solves_spd_system() {
        let h = spd(12, 1);
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let r = minres(|v| (&h * DVector::from_column_slice(v)).as_slice().to_vec(), &b, None, 1e-12, 200);
        assert!(r.converged);
        let exact = h.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for (p, q) in r.x.iter().zip(exact.iter()) {
            assert!((p - q).abs() < 1e-8 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn preconditioned_matches() {
        let h = spd(10, 2);
        let d: Vec<f64> = (0..10).map(|i| 1.0 / h[(i, i)]).collect();
        let b = vec![1.0; 10];
        let r = minres(|v| (&h * DVector::from_column_slice(v)).as_slice().to_vec(), &b, Some(&d), 1e-12, 200);
        let exact = h.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for (p, q) in r.x.iter().zip(exact.iter()) {
            assert!((p - q).abs() < 1e-8 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn singular_consistent_system() {
        // projector onto the complement of (1,1,1); b in its range
        let h = DMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 });
        let b = [1.0, -1.0, 0.0];
        let r = minres(|v| (&h * DVector::from_column_slice(v)).as_slice().to_vec(), &b, None, 1e-12, 50);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-12 && (r.x[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs_and_bad_preconditioner() {
        let r = minres(|v| v.to_vec(), &[0.0, 0.0], None, 1e-8, 5);
        assert!(r.converged && r.iterations == 0);
        let r = minres(|v| v.to_vec(), &[1.0, 0.0], Some(&[-1.0, 1.0]), 1e-8, 5);
        assert!(r.breakdown);
    }
}
