//! The recursive filter against brute-force Gaussian conditioning.

use futopt_core::filter::run_filter;
use futopt_core::market::simulate_path;
use futopt_core::MarketParams;
use nalgebra::{DMatrix, DVector};

/// Stacks the latent Gaussian vector `u = (beta_0, dW2_0.., dW_0..)` and
/// returns `(A, b_rows, mean_u, cov_u)` with `dR = A u` and `beta_N = B u`.
fn linear_model(
    p: &MarketParams,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (d, n, dt) = (p.d, p.n_steps, p.delta_t);
    let dim = d + 2 * n * d;
    let eps = |k: usize| d + k * d;
    let eta = |k: usize| d + n * d + k * d;

    let mut mean = DVector::zeros(dim);
    mean.rows_mut(0, d).copy_from(prior_mean);
    let mut cov = DMatrix::zeros(dim, dim);
    cov.view_mut((0, 0), (d, d)).copy_from(prior_cov);
    for k in 0..n {
        cov.view_mut((eps(k), eps(k)), (d, d))
            .copy_from(&(DMatrix::identity(d, d) * dt));
        cov.view_mut((eta(k), eta(k)), (d, d)).copy_from(&(&p.rho * dt));
    }

    let a = DMatrix::identity(d, d) + &p.alpha * dt;
    // beta_k = M_k u, built forward
    let mut m = DMatrix::zeros(d, dim);
    m.view_mut((0, 0), (d, d)).fill_with_identity();
    let mut obs = DMatrix::zeros(n * d, dim);
    for k in 0..n {
        let mut row = &m * dt;
        row.view_mut((0, eta(k)), (d, d)).copy_from(&p.sigma);
        obs.view_mut((k * d, 0), (d, dim)).copy_from(&row);
        let mut next = &a * &m;
        next.view_mut((0, eps(k)), (d, d)).copy_from(&p.varsigma);
        m = next;
    }
    (obs, m, mean, cov)
}

fn check(p: &MarketParams, seed: u64, prior_mean: DVector<f64>, prior_cov: DMatrix<f64>) {
    let path = simulate_path(p, seed).unwrap();
    let hist = run_filter(&path, p, &prior_cov, &prior_mean).unwrap();

    let (obs, b, mean, cov) = linear_model(p, &prior_mean, &prior_cov);
    let dr = DVector::from_fn(p.n_steps * p.d, |k, _| {
        let (n, i) = (k / p.d, k % p.d);
        path.returns[(n + 1, i)] - path.returns[(n, i)]
    });
    let s_rr = &obs * &cov * obs.transpose();
    let s_br = &b * &cov * obs.transpose();
    let s_rr_inv = s_rr.clone().cholesky().expect("returns covariance is PD").inverse();
    let batch_mean = &b * &mean + &s_br * &s_rr_inv * (dr - &obs * &mean);
    let batch_cov = &b * &cov * b.transpose() - &s_br * &s_rr_inv * s_br.transpose();

    let filtered = hist.beta_hat_at(p.n_steps);
    for i in 0..p.d {
        let rel = (filtered[i] - batch_mean[i]).abs() / batch_mean[i].abs();
        assert!(rel <= 1e-8, "component {i}: {} vs {} (rel {rel:e})", filtered[i], batch_mean[i]);
    }
    let p_n = &hist.p_cov[p.n_steps];
    assert!((p_n - &batch_cov).abs().max() <= 1e-8 * batch_cov.abs().max());
}

#[test]
fn scalar_ten_steps() {
    let mut p = MarketParams::single_asset(0.25, 0.06, 10, 0.1);
    p.alpha[(0, 0)] = -0.7;
    p.varsigma[(0, 0)] = 0.3;
    for seed in 0..5 {
        check(&p, seed, DVector::from_element(1, 0.04), DMatrix::from_element(1, 1, 0.02));
    }
}

#[test]
fn correlated_pair_ten_steps() {
    let mut p = MarketParams::single_asset(0.2, 0.05, 10, 0.1);
    p.d = 2;
    p.sigma = DMatrix::from_row_slice(2, 2, &[0.2, 0.03, -0.05, 0.3]);
    p.rho = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
    p.alpha = DMatrix::from_row_slice(2, 2, &[-0.5, 0.1, 0.0, -1.2]);
    p.varsigma = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.05, 0.1]);
    p.f = DVector::from_element(2, 1.0);
    p.c_spread = DVector::zeros(2);
    p.k = DVector::from_element(2, 1.0);
    p.f0 = DVector::from_element(2, 100.0);
    p.beta0 = DVector::from_column_slice(&[0.05, -0.02]);
    let prior = DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.03]);
    for seed in 0..3 {
        check(&p, seed, DVector::from_column_slice(&[0.03, 0.0]), prior.clone());
    }
}

#[test]
fn frozen_drift_is_bayesian_least_squares() {
    let (sigma, beta, dt, n) = (0.2, 0.3, 1.0 / 252.0, 2000);
    let p = MarketParams::single_asset(sigma, beta, n, dt);
    let path = simulate_path(&p, 42).unwrap();
    let (mu0, p0) = (0.0, 0.5);
    let hist = run_filter(
        &path,
        &p,
        &DMatrix::from_element(1, 1, p0),
        &DVector::from_element(1, mu0),
    )
    .unwrap();

    let mut sum = 0.0;
    for k in 1..=n {
        sum += path.returns[(k, 0)] - path.returns[(k - 1, 0)];
        let precision = 1.0 / p0 + k as f64 * dt / (sigma * sigma);
        let post_var = 1.0 / precision;
        let post_mean = post_var * (mu0 / p0 + sum / (sigma * sigma));
        let est = hist.beta_hat[(k, 0)];
        assert!((est - post_mean).abs() <= 1e-9 * post_mean.abs().max(1e-3), "step {k}");
        assert!((hist.p_cov[k][(0, 0)] - post_var).abs() <= 1e-9 * post_var);
        assert!(hist.p_cov[k][(0, 0)] < hist.p_cov[k - 1][(0, 0)]);
        if k % 250 == 0 {
            assert!((est - beta).abs() <= 4.0 * post_var.sqrt(), "step {k}: {est}");
        }
    }
}
