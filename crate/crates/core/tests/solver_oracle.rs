mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use robust_debias::solver::{self, SolverOptions};
use robust_debias::{fit, fit_from, Penalty, RobustLoss};

#[test]
fn matches_grid_search_on_tiny_problems() {
    let mut rng = common::rng(7);
    for trial in 0..20 {
        let p = 1 + trial % 2;
        let n = rng.random_range(1..=5);
        let x = common::gaussian(n, p, &mut rng);
        let y = common::t2(n, &mut rng) * 2.0;
        let lambda = rng.random_range(0.0..0.5);
        let tau = rng.random_range(0.05..1.0);
        let f0 = common::huber_objective(&x, &y, lambda, tau, &DVector::zeros(p));
        // F(b) >= tau |b|^2 / 2 bounds the minimizer
        let bound = (2.0 * f0 / tau).sqrt() + 1e-3;
        let oracle = common::grid_minimize(|b| common::huber_objective(&x, &y, lambda, tau, b), p, bound);
        let g = Penalty::elastic_net(lambda, tau).unwrap();
        let f = fit(&x, &y, &RobustLoss::huber(1.0).unwrap(), &g, &SolverOptions::default()).unwrap();
        assert!(f.kkt_residual <= 1e-8);
        let gap = (&f.beta_hat - &oracle).amax();
        assert!(gap <= 5e-3, "trial {trial}: solver {} vs grid {oracle}", f.beta_hat);
        assert!(common::huber_objective(&x, &y, lambda, tau, &f.beta_hat) <= common::huber_objective(&x, &y, lambda, tau, &oracle) + 1e-12);
    }
}

fn instance(seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = common::rng(seed);
    let x = common::gaussian(40, 60, &mut rng);
    let beta = common::sparse_beta(60, 6, &mut rng);
    let y = &x * beta + common::t2(40, &mut rng);
    (x, y)
}

#[test]
fn unique_minimizer_from_random_starts() {
    let (x, y) = instance(11);
    let loss = RobustLoss::huber(1.0).unwrap();
    let g = Penalty::elastic_net(0.1, 0.05).unwrap();
    let opts = SolverOptions::default();
    let reference = fit(&x, &y, &loss, &g, &opts).unwrap();
    let mut rng = common::rng(12);
    for _ in 0..10 {
        let start = DVector::from_fn(60, |_, _| rng.random_range(-3.0..3.0));
        let f = fit_from(&x, &y, &loss, &g, &opts, &start).unwrap();
        assert!((&f.beta_hat - &reference.beta_hat).amax() <= 1e-6);
    }
}

#[test]
fn objective_beats_simple_starts() {
    let (x, y) = instance(13);
    let (lambda, tau) = (0.1, 0.2);
    let g = Penalty::elastic_net(lambda, tau).unwrap();
    let f = fit(&x, &y, &RobustLoss::huber(1.0).unwrap(), &g, &SolverOptions::default()).unwrap();
    let n = x.nrows() as f64;
    let mut a = x.tr_mul(&x);
    for d in 0..a.nrows() {
        a[(d, d)] += n * tau;
    }
    let ridge = a.cholesky().unwrap().solve(&x.tr_mul(&y));
    let at = |b: &DVector<f64>| common::huber_objective(&x, &y, lambda, tau, b);
    assert!(at(&f.beta_hat) <= at(&DVector::zeros(60)));
    assert!(at(&f.beta_hat) <= at(&ridge));
    assert!((f.objective - at(&f.beta_hat)).abs() <= 1e-12 * f.objective.max(1.0));
}

#[test]
fn unaccelerated_run_has_monotone_objective() {
    let (x, y) = instance(14);
    let g = Penalty::elastic_net(0.05, 0.1).unwrap();
    let opts = SolverOptions {
        accelerate: false,
        polish: false,
        ..SolverOptions::default()
    };
    let f = fit(&x, &y, &RobustLoss::huber(1.0).unwrap(), &g, &opts).unwrap();
    for w in f.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kkt_certificate_is_reproducible(seed in 0u64..10_000, lambda in 0.01f64..0.5, tau in 0.01f64..1.0) {
        let mut rng = common::rng(seed);
        let x = common::gaussian(15, 8, &mut rng);
        let y = common::t2(15, &mut rng);
        let loss = RobustLoss::huber(1.0).unwrap();
        let g = Penalty::elastic_net(lambda, tau).unwrap();
        let f = fit(&x, &y, &loss, &g, &SolverOptions::default()).unwrap();
        prop_assert!(f.converged && f.kkt_residual <= 1e-8);
        let again = solver::kkt_residual(&x, &y, &loss, &g, &f.beta_hat);
        prop_assert!((again - f.kkt_residual).abs() <= 1e-12);
    }

    #[test]
    fn fitted_psi_matches_residuals(seed in 0u64..10_000) {
        let mut rng = common::rng(seed);
        let x = common::gaussian(12, 5, &mut rng);
        let y = common::t2(12, &mut rng);
        let f = fit(&x, &y, &RobustLoss::huber(1.0).unwrap(), &Penalty::elastic_net(0.1, 0.1).unwrap(), &SolverOptions::default()).unwrap();
        for i in 0..12 {
            let r = y[i] - (x.row(i) * &f.beta_hat)[0];
            prop_assert!((f.residuals[i] - r).abs() < 1e-12);
            prop_assert!((f.psi[i] - r.clamp(-1.0, 1.0)).abs() < 1e-12);
        }
    }
}
