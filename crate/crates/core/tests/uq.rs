use nalgebra::DMatrix;
use rakekit::linop::{two_way_margins, AggOperator};
use rakekit::loss::LossKind;
use rakekit::problem::{Problem, ProblemSpec};
use rakekit::solver::{solve, SolverOptions};
use rakekit::uq::{
    chi2_closed_form_covariance, delta_covariance, input_values, monte_carlo_covariance, n_inputs, DrawPolicy,
    InputCovariance, McOptions, UqError,
};

fn tight() -> SolverOptions {
    SolverOptions { grad_tol: 1e-13, krylov_rtol: 1e-10, ..SolverOptions::default() }
}

fn table(kind: LossKind) -> Problem {
    let y = vec![2.0, 3.5, 1.2, 2.8, 4.1, 2.2];
    let a = two_way_margins(2, 3);
    let s = vec![11.0, 10.0, 5.5, 7.5, 8.0];
    let spec = ProblemSpec::new(kind, y, a, s).weights(vec![1.0, 2.0, 0.5, 1.5, 1.0, 3.0]);
    match kind {
        LossKind::Logistic => spec.bounds(vec![0.5; 6], vec![6.0; 6]).compile().unwrap(),
        _ => spec.compile().unwrap(),
    }
}

fn with_aggregates(kind: LossKind) -> Problem {
    let y = vec![2.0, 3.5, 1.2, 2.8, 4.1, 2.2];
    let a = AggOperator::new(vec![(0..6).collect()], 6).unwrap();
    let b = AggOperator::new(vec![vec![0, 1, 2], vec![0, 3], vec![2, 5]], 6).unwrap();
    let spec =
        ProblemSpec::new(kind, y, a, vec![16.5]).aggregate_observations(b, vec![7.0, 4.5, 3.0], vec![2.0, 1.0, 0.5]);
    match kind {
        LossKind::Logistic => spec
            .bounds(vec![0.5; 6], vec![6.0; 6])
            .aggregate_bounds(vec![1.5, 1.0, 1.0], vec![18.0, 12.0, 12.0])
            .compile()
            .unwrap(),
        _ => spec.compile().unwrap(),
    }
}

fn perturbed(problem: &Problem, idx: usize, h: f64) -> Problem {
    let mut x = input_values(problem);
    x[idx] += h;
    let n_obs = problem.observed().len();
    let k_full = problem.a_full().nrows();
    let s: Vec<f64> = problem.retained().iter().map(|&r| x[n_obs + r]).collect();
    problem.with_inputs(&x[..n_obs], &s, &x[n_obs + k_full..]).unwrap()
}

/// Central differences of the raked values in each input.
fn fd_jacobian(problem: &Problem) -> DMatrix<f64> {
    let n = n_inputs(problem);
    let mut j = DMatrix::zeros(problem.p(), n);
    for c in 0..n {
        if problem.dropped().iter().any(|&r| c == problem.observed().len() + r) {
            continue;
        }
        let h = 1e-5;
        let up = solve(&perturbed(problem, c, h), &tight())
            .unwrap_or_else(|e| panic!("{:?} input {c}: {e}", problem.kind()))
            .beta;
        let dn = solve(&perturbed(problem, c, -h), &tight()).unwrap().beta;
        for i in 0..problem.p() {
            j[(i, c)] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    j
}

fn identity_cov(problem: &Problem) -> InputCovariance {
    InputCovariance::Diagonal(vec![1.0; n_inputs(problem)])
}

#[test]
fn delta_sensitivity_matches_finite_differences() {
    for kind in [LossKind::Chi2, LossKind::Entropic, LossKind::Logistic] {
        for problem in [table(kind), with_aggregates(kind)] {
            let sol = solve(&problem, &tight()).unwrap();
            let r = delta_covariance(&problem, &sol, &identity_cov(&problem)).unwrap();
            let fd = fd_jacobian(&problem);
            let err = (&r.sensitivity - &fd).amax();
            assert!(err < 1e-5, "{kind}: max |J - J_fd| = {err:e}");
        }
    }
}

#[test]
fn constraints_absorb_perturbations() {
    for kind in [LossKind::Chi2, LossKind::Entropic, LossKind::Logistic] {
        let problem = table(kind);
        let sol = solve(&problem, &tight()).unwrap();
        let r = delta_covariance(&problem, &sol, &identity_cov(&problem)).unwrap();
        let p = problem.p();
        let a = problem.a_full();
        for c in 0..n_inputs(&problem) {
            let col: Vec<f64> = r.sensitivity.column(c).iter().copied().collect();
            let ac = a.apply(&col).unwrap();
            for (row, v) in ac.iter().enumerate() {
                let expect = if c >= p && problem.retained().contains(&(c - p)) && c - p == row {
                    1.0
                } else if c < p || problem.dropped().contains(&(c - p)) {
                    0.0
                } else {
                    // a retained margin moves the dropped row it implies
                    continue;
                };
                assert!((v - expect).abs() < 1e-9, "{kind}: input {c} row {row}: {v}");
            }
        }
    }
}

#[test]
fn pruned_margin_has_zero_sensitivity() {
    let problem = table(LossKind::Entropic);
    assert_eq!(problem.dropped().len(), 1);
    let sol = solve(&problem, &tight()).unwrap();
    let r = delta_covariance(&problem, &sol, &identity_cov(&problem)).unwrap();
    let c = problem.p() + problem.dropped()[0];
    assert!(r.sensitivity.column(c).amax() == 0.0);
}

#[test]
fn zero_covariance_gives_zero() {
    let problem = table(LossKind::Entropic);
    let sol = solve(&problem, &tight()).unwrap();
    let r = delta_covariance(&problem, &sol, &InputCovariance::Diagonal(vec![0.0; n_inputs(&problem)])).unwrap();
    assert_eq!(r.sigma_beta.amax(), 0.0);
}

#[test]
fn chi2_closed_form_matches_delta() {
    let problem = table(LossKind::Chi2);
    let sol = solve(&problem, &tight()).unwrap();
    let n = n_inputs(&problem);
    let mut m = DMatrix::from_element(n, n, 0.01);
    for i in 0..n {
        m[(i, i)] = 0.1 * (i + 1) as f64;
    }
    let cov = InputCovariance::Full(m);
    let a = chi2_closed_form_covariance(&problem, &sol, &cov).unwrap();
    let b = delta_covariance(&problem, &sol, &cov).unwrap();
    assert!((&a.sensitivity - &b.sensitivity).amax() < 1e-10);
    assert!((&a.sigma_beta - &b.sigma_beta).amax() < 1e-10);
}

#[test]
fn infinite_weight_pins_sensitivity() {
    let y = vec![2.0, 3.0, 1.0, 3.0];
    let problem = ProblemSpec::new(LossKind::Entropic, y, two_way_margins(2, 2), vec![5.0, 5.0, 4.0, 6.0])
        .weights(vec![f64::INFINITY, 1.0, 1.0, 1.0])
        .compile()
        .unwrap();
    let sol = solve(&problem, &tight()).unwrap();
    let r = delta_covariance(&problem, &sol, &identity_cov(&problem)).unwrap();
    assert_eq!(r.sensitivity[(0, 0)], 1.0);
    assert!(r.sensitivity.row(0).iter().skip(1).all(|&v| v == 0.0));
    let fd = fd_jacobian(&problem);
    assert!((&r.sensitivity - &fd).amax() < 1e-5);
}

#[test]
fn missing_cells_are_unsupported() {
    let truth = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let a = two_way_margins(2, 3);
    let s = a.apply(&truth).unwrap();
    let problem =
        ProblemSpec::new(LossKind::Chi2, truth[1..].to_vec(), a, s).observed(vec![1, 2, 3, 4, 5], 6).compile().unwrap();
    let sol = solve(&problem, &tight()).unwrap();
    let cov = identity_cov(&problem);
    assert!(matches!(delta_covariance(&problem, &sol, &cov), Err(UqError::Unsupported(_))));
}

#[test]
fn monte_carlo_approaches_delta_for_small_noise() {
    let problem = table(LossKind::Entropic);
    let sol = solve(&problem, &tight()).unwrap();
    let n = n_inputs(&problem);
    let mut var = vec![1e-4; n];
    var[problem.p()..].iter_mut().for_each(|v| *v = 0.0);
    let cov = InputCovariance::Diagonal(var);
    let delta = delta_covariance(&problem, &sol, &cov).unwrap();
    let mc =
        monte_carlo_covariance(&problem, &cov, &McOptions { draws: 4000, seed: 7, ..McOptions::default() }).unwrap();
    let rel = (&mc.sigma_beta - &delta.sigma_beta).norm() / delta.sigma_beta.norm();
    assert!(rel < 0.1, "relative gap {rel}");
    assert_eq!(mc.accepted, 4000);
}

#[test]
fn monte_carlo_is_deterministic_and_rejects() {
    let problem = table(LossKind::Entropic);
    let n = n_inputs(&problem);
    let mut var = vec![4.0; n];
    var[problem.p()..].iter_mut().for_each(|v| *v = 0.0);
    let cov = InputCovariance::Diagonal(var);
    let opts = McOptions { draws: 300, seed: 3, policy: DrawPolicy::Reject, keep_draws: true, ..McOptions::default() };
    let a = monte_carlo_covariance(&problem, &cov, &opts).unwrap();
    let b = monte_carlo_covariance(&problem, &cov, &opts).unwrap();
    assert!(a.rejected > 0);
    assert_eq!(a.accepted + a.rejected, 300);
    assert_eq!(a.sigma_beta, b.sigma_beta);
    assert_eq!(a.draws.as_ref().unwrap().len(), a.accepted);

    let fail = McOptions { policy: DrawPolicy::Fail, ..opts };
    match monte_carlo_covariance(&problem, &cov, &fail) {
        Err(UqError::DrawSolveFailed { index, .. }) => assert!(index < 300),
        other => panic!("{other:?}"),
    }
}
