//! Damped Newton-Krylov on the dual.
//!
//! With multipliers `lambda = (lambda_a, lambda_b)` and
//! `z = -(A^T lambda_a + B^T lambda_b)` restricted to the observed cells, the
//! dual objective is
//!
//! ```text
//! D(lambda) = lambda_a^T s + F*(z) + G*(lambda_b)
//! ```
//!
//! where `F*` and `G*` are the weighted conjugates of the cell loss and the
//! aggregate-observation loss. Its gradient is `(s - A beta, zeta - B beta)`
//! with `beta = grad F*(z)` and `zeta = grad G*(lambda_b)`, and its Hessian is
//! `[A; B] diag(S) [A; B]^T + diag(0, S_b)`.
//!
//! The engine optionally restricts `lambda = N mu` for a dense basis `N`;
//! this is how the missing-data dual keeps its equality constraint.

use nalgebra::DMatrix;

use super::krylov::minres;
use super::{max_violation, tol_scale, Diagnostics, IterRecord, Path, Solution, SolverError, SolverOptions};
use crate::dense::{dot, norm_inf};
use crate::linop::Stack;
use crate::loss::Loss;
use crate::problem::Problem;

/// Dual evaluated at one point.
#[derive(Debug, Clone)]
pub(crate) struct DualPoint {
    pub lambda: Vec<f64>,
    pub z: Vec<f64>,
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub objective: f64,
    /// Size of the terms summed into `objective`, for roundoff estimates.
    pub magnitude: f64,
    pub grad: Vec<f64>,
}

pub(crate) struct Dual<'a> {
    stack: Stack<'a>,
    loss: &'a Loss,
    loss_b: Option<&'a Loss>,
    s: &'a [f64],
    ka: usize,
    pub matvecs: u64,
}

impl<'a> Dual<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        let stack = Stack::new(problem.a_obs(), problem.b_obs()).expect("operators share columns");
        Dual {
            ka: problem.a_obs().nrows(),
            stack,
            loss: problem.loss(),
            loss_b: problem.loss_b(),
            s: problem.s(),
            matvecs: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.stack.nrows()
    }

    /// One evaluation counts as one operator application.
    pub fn evaluate(&mut self, lambda: &[f64]) -> DualPoint {
        self.matvecs += 1;
        let mut z = self.stack.apply_transpose(lambda).expect("length k");
        z.iter_mut().for_each(|v| *v = -*v);
        let beta = self.loss.grad_conjugate(&z);
        let (la, lb) = lambda.split_at(self.ka);
        let mut objective = dot(la, self.s) + self.loss.conjugate(&z);
        let zeta = match self.loss_b {
            Some(g) => {
                objective += g.conjugate(lb);
                g.grad_conjugate(lb)
            }
            None => Vec::new(),
        };
        let ab = self.stack.apply(&beta).expect("length p");
        let mut grad = Vec::with_capacity(ab.len());
        grad.extend(self.s.iter().zip(&ab[..self.ka]).map(|(s, a)| s - a));
        grad.extend(zeta.iter().zip(&ab[self.ka..]).map(|(z, b)| z - b));
        if !objective.is_finite() || beta.iter().any(|b| !b.is_finite()) {
            objective = f64::INFINITY;
        }
        let abs_dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a * b).abs()).sum::<f64>();
        let magnitude = objective.abs() + abs_dot(la, self.s) + abs_dot(&z, &beta) + abs_dot(lb, &zeta);
        DualPoint { lambda: lambda.to_vec(), z, beta, zeta, objective, magnitude, grad }
    }

    /// Curvature diagonals at a point: cells, then aggregate observations.
    pub fn curvature(&self, pt: &DualPoint) -> (Vec<f64>, Vec<f64>) {
        let s = self.loss.hess_conjugate_diag(&pt.z);
        let sb = match self.loss_b {
            Some(g) => g.hess_conjugate_diag(&pt.lambda[self.ka..]),
            None => Vec::new(),
        };
        (s, sb)
    }

    pub fn hvp(&mut self, s: &[f64], sb: &[f64], x: &[f64]) -> Vec<f64> {
        self.matvecs += 1;
        let mut out = self.stack.hvp(s, x).expect("length k");
        for (o, (c, xi)) in out[self.ka..].iter_mut().zip(sb.iter().zip(&x[self.ka..])) {
            *o += c * xi;
        }
        out
    }

    pub fn hessian_diag(&self, s: &[f64], sb: &[f64]) -> Vec<f64> {
        let mut d = self.stack.hessian_diag(s);
        for (o, c) in d[self.ka..].iter_mut().zip(sb) {
            *o += c;
        }
        d
    }
}

/// Result of the Newton loop before translation into a [`Solution`].
pub(crate) struct NewtonRun {
    pub point: DualPoint,
    pub trace: Vec<IterRecord>,
    pub converged: bool,
    pub iterations: usize,
    pub matvecs: u64,
    pub grad_inf: f64,
}

fn mat_vec(n: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            for (o, nij) in out.iter_mut().zip(n.column(j).iter()) {
                *o += nij * xj;
            }
        }
    }
    out
}

fn mat_t_vec(n: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..n.ncols()).map(|j| n.column(j).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Relative Krylov tolerance for one outer step: loose while the gradient
/// is large, tightening with the last step's reduction and with the
/// reduction since the start, never below `krylov_rtol`.
fn forcing_term(opts: &SolverOptions, grad_norm: f64, prev_norm: f64, first_norm: f64) -> f64 {
    if !opts.adaptive_forcing {
        return opts.krylov_rtol;
    }
    let mut eta = (grad_norm / first_norm).sqrt();
    if prev_norm.is_finite() && prev_norm > 0.0 {
        eta = eta.min(0.9 * (grad_norm / prev_norm).powi(2));
    }
    if !eta.is_finite() {
        eta = FORCING_MAX;
    }
    eta.clamp(opts.krylov_rtol, FORCING_MAX.max(opts.krylov_rtol))
}

const FORCING_MAX: f64 = 0.5;

/// Newton iterations on `mu -> D(N mu)`, or on `D` itself when `basis` is
/// `None`. `violation` reports the constraint violation of a point.
pub(crate) fn newton_loop(
    dual: &mut Dual<'_>,
    basis: Option<&DMatrix<f64>>,
    scale: f64,
    opts: &SolverOptions,
    path: Path,
    violation: &dyn Fn(&DualPoint) -> f64,
) -> Result<NewtonRun, SolverError> {
    let k = dual.dim();
    let reduce = |g: &[f64]| match basis {
        Some(n) => mat_t_vec(n, g),
        None => g.to_vec(),
    };
    let lift = |d: &[f64]| match basis {
        Some(n) => mat_vec(n, d),
        None => d.to_vec(),
    };
    let mut pt = dual.evaluate(&vec![0.0; k]);
    let mut trace = Vec::new();
    let mut step = 1.0;
    let mut kit = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_norm = f64::NAN;
    let mut first_norm = f64::NAN;
    loop {
        let gr = reduce(&pt.grad);
        let grad_inf = norm_inf(&gr);
        let grad_norm = dot(&gr, &gr).sqrt();
        trace.push(IterRecord {
            iteration: iterations,
            matvecs: dual.matvecs,
            dual_objective: pt.objective,
            grad_inf,
            max_violation: violation(&pt),
            step,
            krylov_iterations: kit,
        });
        if grad_inf <= opts.grad_tol * scale {
            converged = true;
            break;
        }
        if iterations >= opts.max_outer {
            break;
        }
        iterations += 1;

        let (s, sb) = dual.curvature(&pt);
        let hdiag = dual.hessian_diag(&s, &sb);
        let pdiag: Vec<f64> = match basis {
            Some(n) => (0..n.ncols()).map(|j| n.column(j).iter().zip(&hdiag).map(|(v, h)| v * v * h).sum()).collect(),
            None => hdiag,
        };
        let m_inv: Vec<f64> = pdiag.iter().map(|&d| if d > 0.0 && d.is_finite() { 1.0 / d } else { 1.0 }).collect();
        let rhs: Vec<f64> = gr.iter().map(|g| -g).collect();
        if iterations == 1 {
            first_norm = grad_norm;
        }
        let rtol = forcing_term(opts, grad_norm, prev_norm, first_norm);
        prev_norm = grad_norm;

        let attempt = |precond: Option<&[f64]>, dual: &mut Dual<'_>| {
            minres(
                |v| {
                    let hv = dual.hvp(&s, &sb, &lift(v));
                    reduce(&hv)
                },
                &rhs,
                precond,
                rtol,
                opts.krylov_maxit,
            )
        };
        let mut kr = attempt(Some(&m_inv), dual);
        if kr.breakdown || dot(&kr.x, &gr) >= 0.0 {
            kr = attempt(None, dual);
            if kr.breakdown || dot(&kr.x, &gr) >= 0.0 {
                return Err(SolverError::SingularSystem {
                    path,
                    detail: format!("Krylov breakdown at outer iteration {iterations}"),
                });
            }
        }
        kit = kr.iterations;
        let dir = lift(&kr.x);
        let slope = dot(&gr, &kr.x);

        let mut t = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = pt.lambda.iter().zip(&dir).map(|(l, d)| l + t * d).collect();
            let cand = dual.evaluate(&trial);
            let armijo = pt.objective + opts.armijo_c * t * slope;
            if cand.objective <= armijo {
                break Some(cand);
            }
            // below machine precision the objective cannot rank points, so
            // fall back to the gradient norm
            let slack = 10.0 * f64::EPSILON * pt.magnitude;
            if cand.objective <= armijo + slack && norm_inf(&reduce(&cand.grad)) < grad_inf {
                break Some(cand);
            }
            t *= 0.5;
            if t < opts.min_step {
                break None;
            }
        };
        match accepted {
            Some(cand) => {
                pt = cand;
                step = t;
            }
            None => {
                // stalled in roundoff close to the optimum
                if grad_inf <= opts.cons_tol * scale {
                    converged = true;
                }
                break;
            }
        }
    }
    let grad_inf = norm_inf(&reduce(&pt.grad));
    Ok(NewtonRun { point: pt, trace, converged, iterations, matvecs: dual.matvecs, grad_inf })
}

/// Newton on the joint dual of constraints and aggregate observations.
pub fn solve_newton_dual(problem: &Problem, opts: &SolverOptions) -> Result<Solution, SolverError> {
    opts.validate()?;
    if problem.has_missing() {
        return Err(SolverError::PathNotApplicable {
            path: Path::NewtonDual,
            reason: "problem has missing cells".into(),
        });
    }
    let mut dual = Dual::new(problem);
    let scale = tol_scale(problem);
    // over every constraint as given, including pruned ones
    let viol = |pt: &DualPoint| max_violation(problem, &pt.beta);
    let run = newton_loop(&mut dual, None, scale, opts, Path::NewtonDual, &viol)?;
    let beta = problem.scatter_observed(&run.point.beta, f64::NAN);
    let sol = Solution {
        diagnostics: Diagnostics {
            path: Path::NewtonDual,
            converged: run.converged,
            outer_iterations: run.iterations,
            matvecs: run.matvecs,
            dual_objective: run.point.objective,
            grad_inf: run.grad_inf,
            max_violation: max_violation(problem, &beta),
            trace: run.trace,
        },
        recovered: vec![false; problem.p()],
        beta,
        lambda: run.point.lambda,
        zeta: run.point.zeta,
    };
    if !run.converged {
        return Err(SolverError::NoConvergence {
            path: Path::NewtonDual,
            iterations: run.iterations,
            grad_inf: sol.diagnostics.grad_inf,
            max_violation: sol.diagnostics.max_violation,
            partial: Box::new(sol),
        });
    }
    Ok(sol)
}
