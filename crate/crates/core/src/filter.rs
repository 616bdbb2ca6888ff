//! Conditional drift estimation from observed returns.
//!
//! The drift follows `beta_{n+1} = (I + alpha dt) beta_n + varsigma dW2_n` and
//! is seen only through `Delta R_n = beta_n dt + sigma dW_n`. For this
//! linear-Gaussian pair the Kalman recursion yields the exact conditional
//! expectation `E[beta_{t_n} | F^R_{t_n}]` given a Gaussian prior.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, is_nonsingular, symmetrize, Solver};
use crate::market::{MarketParams, PathState};
use crate::montecarlo::MeanVar;

/// Filter output at grid time `t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// Grid index `n`; the estimate uses `Delta R_0 .. Delta R_{n-1}`.
    pub step: usize,
    /// `E[beta_{t_n} | F^R_{t_n}]`.
    pub beta_hat: DVector<f64>,
    /// Error covariance of `beta_hat`.
    pub p_cov: DMatrix<f64>,
    /// Cumulative innovation `nu_{t_n}`, `nu_{t_0} = 0`.
    pub nu: DVector<f64>,
}

impl FilterState {
    pub fn initial(beta_hat0: DVector<f64>, p_cov0: DMatrix<f64>) -> Self {
        let d = beta_hat0.len();
        Self {
            step: 0,
            beta_hat: beta_hat0,
            p_cov: p_cov0,
            nu: DVector::zeros(d),
        }
    }
}

/// `varsigma varsigma' max(dt, 0.01)`.
pub fn default_p_cov0(params: &MarketParams) -> DMatrix<f64> {
    &params.varsigma * params.varsigma.transpose() * params.delta_t.max(0.01)
}

/// Precomputed filter matrices for one parameter set.
#[derive(Debug, Clone)]
pub struct DriftFilter {
    dt: f64,
    transition: DMatrix<f64>,
    process_noise: DMatrix<f64>,
    obs_noise: DMatrix<f64>,
    sigma: Solver,
}

impl DriftFilter {
    pub fn new(params: &MarketParams) -> Result<Self> {
        params.validate()?;
        if !is_nonsingular(&params.sigma) {
            return Err(Error::Singular(
                "sigma (the innovation sigma^-1 (dR - beta_hat dt) is undefined)".into(),
            ));
        }
        let d = params.d;
        let dt = params.delta_t;
        let transition = DMatrix::identity(d, d) + &params.alpha * dt;
        let process_noise = &params.varsigma * params.varsigma.transpose() * dt;
        let mut obs_noise = &params.sigma * &params.rho * params.sigma.transpose() * dt;
        symmetrize(&mut obs_noise);
        Ok(Self {
            dt,
            transition,
            process_noise,
            obs_noise,
            sigma: Solver::new(params.sigma.clone(), "sigma")?,
        })
    }

    /// One update with `Delta R_{t_n}` followed by the prediction to `t_{n+1}`.
    ///
    /// Returns the new state and the innovation increment
    /// `Delta nu_n = sigma^-1 (Delta R_n - beta_hat_n dt)`, which uses the
    /// estimate held *before* `Delta R_n` is seen.
    pub fn step(
        &self,
        state: &FilterState,
        delta_r: &DVector<f64>,
    ) -> Result<(FilterState, DVector<f64>)> {
        let d = state.beta_hat.len();
        if delta_r.len() != d || state.p_cov.shape() != (d, d) {
            return Err(Error::shape("filter state and return vector disagree"));
        }
        if delta_r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite return at step {}",
                state.step
            )));
        }
        let dt = self.dt;
        let resid = delta_r - &state.beta_hat * dt;
        let innovation = self.sigma.solve(&resid)?;

        let s = &state.p_cov * (dt * dt) + &self.obs_noise;
        let s_chol = cholesky_lower(&s, "innovation covariance")
            .map_err(|_| Error::SingularInnovation { step: state.step })?;
        let s_chol = nalgebra::Cholesky::pack_dirty(s_chol);
        // K' = S^-1 (dt P)
        let gain = s_chol.solve(&(&state.p_cov * dt)).transpose();

        let updated = &state.beta_hat + &gain * &resid;
        let i_minus = DMatrix::identity(d, d) - &gain * dt;
        let p_upd = &i_minus * &state.p_cov * i_minus.transpose()
            + &gain * &self.obs_noise * gain.transpose();

        let beta_hat = &self.transition * updated;
        let mut p_cov = &self.transition * p_upd * self.transition.transpose() + &self.process_noise;
        symmetrize(&mut p_cov);

        let next = FilterState {
            step: state.step + 1,
            beta_hat,
            p_cov,
            nu: &state.nu + &innovation,
        };
        Ok((next, innovation))
    }
}

/// One predict/update cycle; see [`DriftFilter::step`].
pub fn filter_step(
    state: &FilterState,
    delta_r: &DVector<f64>,
    params: &MarketParams,
) -> Result<(FilterState, DVector<f64>)> {
    DriftFilter::new(params)?.step(state, delta_r)
}

/// Filter trajectory over a path.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterHistory {
    /// `(N+1) x d`, row `n` is `E[beta_{t_n} | F^R_{t_n}]`.
    pub beta_hat: DMatrix<f64>,
    /// `N+1` error covariances.
    pub p_cov: Vec<DMatrix<f64>>,
    /// `N x d` innovation increments.
    pub innovations: DMatrix<f64>,
}

impl FilterHistory {
    pub fn n_steps(&self) -> usize {
        self.innovations.nrows()
    }

    pub fn beta_hat_at(&self, n: usize) -> DVector<f64> {
        self.beta_hat.row(n).transpose()
    }

    /// `(N+1) x d` cumulative innovation with a zero first row.
    pub fn nu(&self) -> DMatrix<f64> {
        let (n, d) = self.innovations.shape();
        let mut out = DMatrix::zeros(n + 1, d);
        for k in 0..n {
            for i in 0..d {
                out[(k + 1, i)] = out[(k, i)] + self.innovations[(k, i)];
            }
        }
        out
    }
}

/// Run the filter over the returns of `path`. Latent fields are never read.
pub fn run_filter(
    path: &PathState,
    params: &MarketParams,
    p_cov0: &DMatrix<f64>,
    beta_hat0: &DVector<f64>,
) -> Result<FilterHistory> {
    let filter = DriftFilter::new(params)?;
    let d = params.d;
    if path.dim() != d || beta_hat0.len() != d || p_cov0.shape() != (d, d) {
        return Err(Error::shape("path, prior mean and prior covariance must match d"));
    }
    let n_steps = path.n_steps();
    let mut beta_hat = DMatrix::zeros(n_steps + 1, d);
    let mut innovations = DMatrix::zeros(n_steps, d);
    let mut covs = Vec::with_capacity(n_steps + 1);

    let mut state = FilterState::initial(beta_hat0.clone(), p_cov0.clone());
    beta_hat.set_row(0, &state.beta_hat.transpose());
    covs.push(state.p_cov.clone());
    for n in 0..n_steps {
        let (next, innov) = filter.step(&state, &path.delta_r(n))?;
        innovations.set_row(n, &innov.transpose());
        beta_hat.set_row(n + 1, &next.beta_hat.transpose());
        covs.push(next.p_cov.clone());
        state = next;
    }
    Ok(FilterHistory {
        beta_hat,
        p_cov: covs,
        innovations,
    })
}

pub const MIN_DIAGNOSTIC_STEPS: usize = 30;

/// Flat `(metric, component, value, stderr)` record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub metric: String,
    pub component: String,
    pub value: f64,
    pub stderr: f64,
}

/// Sample properties of the innovation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralityReport {
    pub n: usize,
    pub delta_t: f64,
    /// Per-component sample mean of `Delta nu`.
    pub mean: Vec<MeanVar>,
    /// Sample covariance of `Delta nu`.
    pub cov: DMatrix<f64>,
    pub cov_stderr: DMatrix<f64>,
    /// `rho dt`.
    pub cov_target: DMatrix<f64>,
    /// Sample correlation of `Delta nu_i` with the price `F_i` at the start
    /// of the same step.
    pub price_corr: Vec<f64>,
}

impl NeutralityReport {
    /// Bound on `|mean(Delta nu_i)|` at three standard errors, `3 sqrt(dt / N)`.
    pub fn mean_bound(&self) -> f64 {
        3.0 * (self.delta_t / self.n as f64).sqrt()
    }

    pub fn cov_z_scores(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.cov.nrows(), self.cov.ncols(), |i, j| {
            (self.cov[(i, j)] - self.cov_target[(i, j)]) / self.cov_stderr[(i, j)]
        })
    }

    pub fn rows(&self) -> Vec<DiagnosticRow> {
        let d = self.cov.nrows();
        let mut out = Vec::new();
        let corr_se = 1.0 / (self.n as f64).sqrt();
        for (i, m) in self.mean.iter().enumerate() {
            out.push(DiagnosticRow {
                metric: "innovation_mean".into(),
                component: format!("{}", i + 1),
                value: m.mean,
                stderr: m.stderr(),
            });
        }
        for i in 0..d {
            for j in 0..=i {
                let component = format!("{}_{}", i + 1, j + 1);
                out.push(DiagnosticRow {
                    metric: "innovation_cov".into(),
                    component: component.clone(),
                    value: self.cov[(i, j)],
                    stderr: self.cov_stderr[(i, j)],
                });
                out.push(DiagnosticRow {
                    metric: "innovation_cov_target".into(),
                    component,
                    value: self.cov_target[(i, j)],
                    stderr: 0.0,
                });
            }
        }
        for (i, c) in self.price_corr.iter().enumerate() {
            out.push(DiagnosticRow {
                metric: "innovation_price_corr".into(),
                component: format!("{}", i + 1),
                value: *c,
                stderr: corr_se,
            });
        }
        out
    }
}

/// Mean, covariance and price-orthogonality of the innovations.
pub fn neutrality_diagnostics(
    innovations: &DMatrix<f64>,
    path: &PathState,
    params: &MarketParams,
) -> Result<NeutralityReport> {
    let (n, d) = innovations.shape();
    if n < MIN_DIAGNOSTIC_STEPS {
        return Err(Error::InsufficientSample {
            need: MIN_DIAGNOSTIC_STEPS,
            got: n,
        });
    }
    if path.n_steps() != n || path.dim() != d {
        return Err(Error::shape("innovations and path are on different grids"));
    }
    let mean: Vec<MeanVar> = (0..d)
        .map(|i| {
            let mut acc = MeanVar::new();
            innovations.column(i).iter().for_each(|&x| acc.push(x));
            acc
        })
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    let mut cov_stderr = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let (mi, mj) = (mean[i].mean, mean[j].mean);
            let mut acc = MeanVar::new();
            for k in 0..n {
                acc.push((innovations[(k, i)] - mi) * (innovations[(k, j)] - mj));
            }
            let c = acc.mean * n as f64 / (n - 1) as f64;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
            cov_stderr[(i, j)] = acc.stderr();
            cov_stderr[(j, i)] = acc.stderr();
        }
    }
    let price_corr = (0..d)
        .map(|i| {
            let x: Vec<f64> = innovations.column(i).iter().copied().collect();
            let y: Vec<f64> = (0..n).map(|k| path.prices[(k, i)]).collect();
            correlation(&x, &y)
        })
        .collect();
    Ok(NeutralityReport {
        n,
        delta_t: params.delta_t,
        mean,
        cov,
        cov_stderr,
        cov_target: &params.rho * params.delta_t,
        price_corr,
    })
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
