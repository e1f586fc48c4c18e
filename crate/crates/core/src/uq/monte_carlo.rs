//! Monte Carlo covariance: rake Gaussian perturbations of the inputs.
//!
//! Draw `i` uses its own ChaCha8 stream (`seed`, stream `i`), so results do
//! not depend on thread count. Draws are grouped in fixed blocks whose
//! running moments are merged in index order.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::{input_values, n_inputs, DrawFailure, InputCovariance, UqError};
use crate::problem::Problem;
use crate::solver::{solve, solve_with_path, Path, SolverOptions};

const BLOCK: usize = 1024;

/// What to do with a draw that cannot be raked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DrawPolicy {
    /// Stop and report the first failing draw.
    #[default]
    Fail,
    /// Skip it and count it.
    Reject,
}

#[derive(Debug, Clone)]
pub struct McOptions {
    pub draws: usize,
    pub seed: u64,
    pub policy: DrawPolicy,
    /// Return the raked value of every accepted draw.
    pub keep_draws: bool,
    pub solver: SolverOptions,
    /// Force one solver path instead of dispatching.
    pub path: Option<Path>,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            draws: 1000,
            seed: 0,
            policy: DrawPolicy::Fail,
            keep_draws: false,
            solver: SolverOptions::default(),
            path: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct McResult {
    pub mean: Vec<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub accepted: usize,
    pub rejected: usize,
    /// Accepted draws in index order, when requested.
    pub draws: Option<Vec<Vec<f64>>>,
}

/// Running mean and scatter matrix.
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(p: usize) -> Self {
        Moments { n: 0, mean: DVector::zeros(p), m2: DMatrix::zeros(p, p) }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let d = &x - &self.mean;
        self.mean += &d / self.n as f64;
        let d2 = &x - &self.mean;
        self.m2.ger(1.0, &d, &d2, 1.0);
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let n = (self.n + other.n) as f64;
        let d = &other.mean - &self.mean;
        let f = self.n as f64 * other.n as f64 / n;
        self.m2 += &other.m2;
        self.m2.ger(f, &d, &d, 1.0);
        self.mean += &d * (other.n as f64 / n);
        self.n += other.n;
    }
}

struct BlockOut {
    moments: Moments,
    rejected: usize,
    kept: Vec<Vec<f64>>,
    failure: Option<(usize, DrawFailure)>,
}

/// `L` with `L L^T = Sigma`; negative eigenvalues from roundoff are clipped.
fn factor(cov: &InputCovariance) -> DMatrix<f64> {
    match cov {
        InputCovariance::Diagonal(d) => {
            DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|v| v.max(0.0).sqrt())))
        }
        InputCovariance::Full(m) => {
            let eig = m.clone().symmetric_eigen();
            let mut l = eig.eigenvectors;
            for (c, v) in eig.eigenvalues.iter().enumerate() {
                l.column_mut(c).scale_mut(v.max(0.0).sqrt());
            }
            l
        }
    }
}

pub fn monte_carlo_covariance(problem: &Problem, cov: &InputCovariance, opts: &McOptions) -> Result<McResult, UqError> {
    if opts.draws < 2 {
        return Err(UqError::TooFewDraws(opts.draws));
    }
    let n_in = n_inputs(problem);
    cov.validate(n_in)?;
    opts.solver.validate().map_err(|e| UqError::Unsupported(e.to_string()))?;
    let l = factor(cov);
    let mu = DVector::from_vec(input_values(problem));
    let p = problem.p();
    let n_obs = problem.observed().len();
    let k_full = problem.a_full().nrows();
    let retained = problem.retained();

    let run_draw = |i: usize| -> Result<Vec<f64>, DrawFailure> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let z = DVector::from_iterator(n_in, (0..n_in).map(|_| StandardNormal.sample(&mut rng)));
        let x = &mu + &l * z;
        let x = x.as_slice();
        let s_full = &x[n_obs..n_obs + k_full];
        let s: Vec<f64> = retained.iter().map(|&r| s_full[r]).collect();
        let drawn = problem.with_inputs(&x[..n_obs], &s, &x[n_obs + k_full..])?;
        let sol = match opts.path {
            Some(path) => solve_with_path(&drawn, path, &opts.solver)?,
            None => solve(&drawn, &opts.solver)?,
        };
        Ok(sol.beta)
    };

    let run_block = |b: usize| -> BlockOut {
        let mut out = BlockOut { moments: Moments::new(p), rejected: 0, kept: Vec::new(), failure: None };
        for i in b * BLOCK..((b + 1) * BLOCK).min(opts.draws) {
            match run_draw(i) {
                Ok(beta) => {
                    out.moments.push(&beta);
                    if opts.keep_draws {
                        out.kept.push(beta);
                    }
                }
                Err(e) => match opts.policy {
                    DrawPolicy::Reject => out.rejected += 1,
                    DrawPolicy::Fail => {
                        out.failure = Some((i, e));
                        break;
                    }
                },
            }
        }
        out
    };

    let n_blocks = opts.draws.div_ceil(BLOCK);
    #[cfg(feature = "parallel")]
    let blocks: Vec<BlockOut> = (0..n_blocks).into_par_iter().map(run_block).collect();
    #[cfg(not(feature = "parallel"))]
    let blocks: Vec<BlockOut> = (0..n_blocks).map(run_block).collect();

    let mut total = Moments::new(p);
    let mut rejected = 0;
    let mut kept = Vec::new();
    for block in blocks {
        if let Some((index, source)) = block.failure {
            return Err(UqError::DrawSolveFailed { index, source: Box::new(source) });
        }
        total.merge(&block.moments);
        rejected += block.rejected;
        kept.extend(block.kept);
    }
    if total.n == 0 {
        return Err(UqError::AllDrawsRejected(rejected));
    }
    if total.n < 2 {
        return Err(UqError::TooFewDraws(total.n));
    }
    let sigma = &total.m2 / (total.n - 1) as f64;
    Ok(McResult {
        mean: total.mean.as_slice().to_vec(),
        sigma_beta: (&sigma + sigma.transpose()) * 0.5,
        accepted: total.n,
        rejected,
        draws: opts.keep_draws.then_some(kept),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64 * 0.5]).collect();
        let mut one = Moments::new(2);
        xs.iter().for_each(|x| one.push(x));
        let mut a = Moments::new(2);
        let mut b = Moments::new(2);
        xs[..3].iter().for_each(|x| a.push(x));
        xs[3..].iter().for_each(|x| b.push(x));
        a.merge(&b);
        assert_eq!(a.n, 7);
        assert!((a.mean - one.mean).amax() < 1e-12);
        assert!((a.m2 - one.m2).amax() < 1e-10);
    }

    #[test]
    fn factor_reproduces_covariance() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5]);
        let l = factor(&InputCovariance::Full(m.clone()));
        assert!((&l * l.transpose() - m).amax() < 1e-12);
    }
}
