//! Entropic raking of a vector to a single total.
//!
//! With equal weights the answer is a rescaling of `y`. With unequal weights
//! the multiplier solves the scalar equation `sum_i y_i exp(-lambda / w_i) = s`.

use super::{Diagnostics, IterRecord, Path, Solution, SolverError, SolverOptions};

/// Rake `y` to total `s`; `w = None` means equal weights.
pub fn solve_1d_entropic(y: &[f64], w: Option<&[f64]>, s: f64, opts: &SolverOptions) -> Result<Solution, SolverError> {
    if let Some((index, &value)) = y.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(SolverError::NonPositiveInput { index, value });
    }
    if !(s > 0.0) {
        return Err(SolverError::NonPositiveInput { index: y.len(), value: s });
    }
    let total: f64 = y.iter().sum();
    match w {
        None => {
            let ratio = s / total;
            let beta: Vec<f64> = y.iter().map(|v| ratio * v).collect();
            let lambda = -ratio.ln();
            let objective = lambda * s + (ratio - 1.0) * total;
            let violation = (beta.iter().sum::<f64>() - s).abs();
            Ok(Solution {
                recovered: vec![false; y.len()],
                beta,
                lambda: vec![lambda],
                zeta: Vec::new(),
                diagnostics: Diagnostics {
                    path: Path::OneDClosedForm,
                    converged: true,
                    outer_iterations: 0,
                    matvecs: 1,
                    dual_objective: objective,
                    grad_inf: violation,
                    max_violation: violation,
                    trace: Vec::new(),
                },
            })
        }
        Some(w) => weighted(y, w, s, opts),
    }
}

/// `D(lambda) = lambda s + sum w_i y_i (exp(-lambda / w_i) - 1)`, with
/// infinite weights contributing the linear limit `-lambda y_i`.
///
/// Returns the objective, gradient, curvature, primal point and the sum of
/// the magnitudes of the objective's terms (the scale of its roundoff).
fn dual(y: &[f64], w: &[f64], s: f64, lambda: f64) -> (f64, f64, f64, Vec<f64>, f64) {
    let mut obj = lambda * s;
    let mut magnitude = obj.abs();
    let mut sum = 0.0;
    let mut curv = 0.0;
    let beta: Vec<f64> = y
        .iter()
        .zip(w)
        .map(|(&yi, &wi)| {
            if wi.is_infinite() {
                obj -= lambda * yi;
                magnitude += (lambda * yi).abs();
                yi
            } else {
                let e = (-lambda / wi).exp_m1();
                obj += wi * yi * e;
                magnitude += (wi * yi * e).abs();
                let b = yi * (e + 1.0);
                curv += b / wi;
                b
            }
        })
        .collect();
    beta.iter().for_each(|b| sum += b);
    (obj, s - sum, curv, beta, magnitude)
}

fn weighted(y: &[f64], w: &[f64], s: f64, opts: &SolverOptions) -> Result<Solution, SolverError> {
    let scale = s.abs().max(1.0);
    let mut lambda = 0.0;
    let mut matvecs = 1;
    let (mut obj, mut g, mut h, mut beta, mut magnitude) = dual(y, w, s, lambda);
    let mut trace = Vec::new();
    let mut step = 1.0;
    let mut it = 0;
    let converged = loop {
        trace.push(IterRecord {
            iteration: it,
            matvecs,
            dual_objective: obj,
            grad_inf: g.abs(),
            max_violation: g.abs(),
            step,
            krylov_iterations: 0,
        });
        if g.abs() <= opts.cons_tol.min(opts.grad_tol) * scale {
            break true;
        }
        if it >= opts.max_outer || !(h > 0.0) {
            break false;
        }
        it += 1;
        let d = -g / h;
        let mut t = 1.0;
        let accepted = loop {
            let cand = dual(y, w, s, lambda + t * d);
            matvecs += 1;
            let armijo = obj + opts.armijo_c * t * g * d;
            if cand.0.is_finite() && cand.0 <= armijo {
                break Some(cand);
            }
            // inside the objective's roundoff only a smaller gradient counts
            let slack = 10.0 * f64::EPSILON * magnitude;
            if cand.0 <= armijo + slack && cand.1.abs() < g.abs() {
                break Some(cand);
            }
            t *= 0.5;
            if t < opts.min_step {
                break None;
            }
        };
        match accepted {
            Some(c) => {
                lambda += t * d;
                (obj, g, h, beta, magnitude) = c;
                step = t;
            }
            None => break g.abs() <= opts.cons_tol * scale,
        }
    };
    let sol = Solution {
        recovered: vec![false; y.len()],
        beta,
        lambda: vec![lambda],
        zeta: Vec::new(),
        diagnostics: Diagnostics {
            path: Path::OneDWeightedNewton,
            converged,
            outer_iterations: it,
            matvecs,
            dual_objective: obj,
            grad_inf: g.abs(),
            max_violation: g.abs(),
            trace,
        },
    };
    if !converged {
        return Err(SolverError::NoConvergence {
            path: Path::OneDWeightedNewton,
            iterations: it,
            grad_inf: g.abs(),
            max_violation: g.abs(),
            partial: Box::new(sol),
        });
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_to_total() {
        let sol = solve_1d_entropic(&[1.0, 2.0, 3.0], None, 12.0, &SolverOptions::default()).unwrap();
        assert_eq!(sol.beta, vec![2.0, 4.0, 6.0]);
        let sol = solve_1d_entropic(&[1.0, 2.0, 3.0], None, 6.0, &SolverOptions::default()).unwrap();
        assert_eq!(sol.beta, vec![1.0, 2.0, 3.0]);
        assert_eq!(sol.lambda, vec![0.0]);
    }

    #[test]
    fn rejects_non_positive() {
        let o = SolverOptions::default();
        assert!(matches!(
            solve_1d_entropic(&[1.0, 0.0], None, 1.0, &o),
            Err(SolverError::NonPositiveInput { index: 1, .. })
        ));
        assert!(solve_1d_entropic(&[1.0], None, -1.0, &o).is_err());
    }

    /// Bisection on the dual derivative `s - sum y_i exp(-lambda / w_i)`.
    fn bisect(y: &[f64], w: &[f64], s: f64) -> f64 {
        let f = |l: f64| s - y.iter().zip(w).map(|(a, b)| a * (-l / b).exp()).sum::<f64>();
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn weighted_matches_bisection() {
        let y = [1.0, 2.0, 3.0];
        let w = [1e12, 1.0, 1.0];
        let sol = solve_1d_entropic(&y, Some(&w), 12.0, &SolverOptions::default()).unwrap();
        assert!((sol.beta[0] - 1.0).abs() < 1e-6);
        assert!((sol.beta[1] + sol.beta[2] - 11.0).abs() < 1e-6);
        assert!((sol.lambda[0] - bisect(&y, &w, 12.0)).abs() < 1e-9);

        let w = [0.5, 2.0, 3.0];
        let sol = solve_1d_entropic(&y, Some(&w), 9.0, &SolverOptions::default()).unwrap();
        assert!((sol.lambda[0] - bisect(&y, &w, 9.0)).abs() < 1e-9);
        assert!((sol.beta.iter().sum::<f64>() - 9.0).abs() < 1e-8);
    }

    #[test]
    fn infinite_weight_is_pinned() {
        let y = [1.0, 2.0, 3.0];
        let sol = solve_1d_entropic(&y, Some(&[f64::INFINITY, 1.0, 1.0]), 12.0, &SolverOptions::default()).unwrap();
        assert_eq!(sol.beta[0], 1.0);
        assert!((sol.beta[1] - 4.4).abs() < 1e-9);
    }
}
