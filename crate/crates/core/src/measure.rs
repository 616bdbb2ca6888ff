//! Relative risk, exponential martingale, change of measure, discounting and
//! the state price density along a path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{quad_form, Solver};
use crate::market::{Convention, MarketParams};

/// Default cap on `|theta_n|`.
pub const DEFAULT_THETA_MAX: f64 = 10.0;

/// Solves for the relative risk `theta` given an effective drift.
#[derive(Debug, Clone)]
pub struct RiskMap {
    solver: Solver,
    convention: Convention,
}

impl RiskMap {
    pub fn new(params: &MarketParams, convention: Convention) -> Result<Self> {
        let m = match convention {
            Convention::Consistent => &params.sigma * &params.rho,
            Convention::Literal => &params.rho * &params.sigma,
        };
        Ok(Self {
            solver: Solver::new(m, "rho sigma")?,
            convention,
        })
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    /// `theta` with `(sigma rho) theta = beta_eff` (or `(rho sigma)` when literal).
    pub fn theta(&self, beta_eff: &DVector<f64>) -> Result<DVector<f64>> {
        self.solver.solve(beta_eff)
    }
}

/// Relative risk under the default convention; see [`RiskMap`].
pub fn relative_risk(beta_eff: &DVector<f64>, params: &MarketParams) -> Result<DVector<f64>> {
    relative_risk_with(beta_eff, params, Convention::Consistent)
}

pub fn relative_risk_with(
    beta_eff: &DVector<f64>,
    params: &MarketParams,
    convention: Convention,
) -> Result<DVector<f64>> {
    if beta_eff.len() != params.d {
        return Err(Error::shape("beta_eff must have length d"));
    }
    RiskMap::new(params, convention)?.theta(beta_eff)
}

/// Scale `theta` down to norm `theta_max` when it exceeds it.
pub fn cap_theta(theta: &mut DVector<f64>, theta_max: f64) -> bool {
    let norm = theta.norm();
    if norm > theta_max {
        *theta *= theta_max / norm;
        true
    } else {
        false
    }
}

/// `N x d` relative risk from drift rows `0..N`, net of an optional cost
/// matrix, capped at `theta_max`. Returns the path and the number of capped
/// steps.
pub fn theta_path(
    drift: &DMatrix<f64>,
    cost: Option<&DMatrix<f64>>,
    n_steps: usize,
    risk: &RiskMap,
    theta_max: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let d = drift.ncols();
    if drift.nrows() < n_steps {
        return Err(Error::shape("drift path shorter than the grid"));
    }
    if let Some(c) = cost {
        if c.shape() != (n_steps, d) {
            return Err(Error::shape("cost matrix must be N x d"));
        }
    }
    let mut theta = DMatrix::zeros(n_steps, d);
    let mut capped = 0;
    let mut eff = DVector::zeros(d);
    for n in 0..n_steps {
        for i in 0..d {
            let c = cost.map_or(0.0, |c| c[(n, i)]);
            eff[i] = drift[(n, i)] - if c.is_finite() { c } else { 0.0 };
        }
        let mut th = risk.theta(&eff)?;
        if cap_theta(&mut th, theta_max) {
            capped += 1;
        }
        theta.set_row(n, &th.transpose());
    }
    Ok((theta, capped))
}

fn check_pair(theta: &DMatrix<f64>, dw: &DMatrix<f64>, d: usize) -> Result<()> {
    if theta.shape() != dw.shape() || theta.ncols() != d {
        return Err(Error::shape(format!(
            "theta {:?} and increments {:?} must both be N x {d}",
            theta.shape(),
            dw.shape()
        )));
    }
    Ok(())
}

fn row(m: &DMatrix<f64>, n: usize) -> DVector<f64> {
    m.row(n).transpose()
}

/// `Z_{t_n} = exp{-sum theta' dW - 1/2 sum theta' rho theta dt}`, `Z_0 = 1`.
pub fn exponential_martingale(
    theta: &DMatrix<f64>,
    dw: &DMatrix<f64>,
    params: &MarketParams,
) -> Result<DVector<f64>> {
    check_pair(theta, dw, params.d)?;
    let n_steps = theta.nrows();
    let mut z = DVector::zeros(n_steps + 1);
    z[0] = 1.0;
    let mut log_z = 0.0;
    for n in 0..n_steps {
        let th = row(theta, n);
        let w = row(dw, n);
        log_z += -th.dot(&w) - 0.5 * quad_form(&th, &params.rho, &th) * params.delta_t;
        let v = log_z.exp();
        if !log_z.is_finite() || !v.is_finite() || v == 0.0 {
            return Err(Error::Overflow {
                quantity: "Z",
                step: n + 1,
            });
        }
        z[n + 1] = v;
    }
    Ok(z)
}

/// First-order recursion `Z_{n+1} = Z_n (1 - theta_n' dW_n)`.
pub fn exponential_martingale_recursive(
    theta: &DMatrix<f64>,
    dw: &DMatrix<f64>,
) -> DVector<f64> {
    let n_steps = theta.nrows();
    let mut z = DVector::zeros(n_steps + 1);
    z[0] = 1.0;
    for n in 0..n_steps {
        z[n + 1] = z[n] * (1.0 - row(theta, n).dot(&row(dw, n)));
    }
    z
}

/// Gap between the closed-form and recursive `Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionGap {
    pub max_abs_gap: f64,
    /// `max_abs_gap / dt`, the first-order constant.
    pub constant: f64,
}

pub fn z_recursion_gap(
    theta: &DMatrix<f64>,
    dw: &DMatrix<f64>,
    params: &MarketParams,
) -> Result<RecursionGap> {
    let closed = exponential_martingale(theta, dw, params)?;
    let rec = exponential_martingale_recursive(theta, dw);
    let max_abs_gap = closed
        .iter()
        .zip(rec.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(RecursionGap {
        max_abs_gap,
        constant: max_abs_gap / params.delta_t,
    })
}

/// `Delta W~ = Delta W + rho theta dt`, `N x d`.
pub fn change_measure(
    theta: &DMatrix<f64>,
    dw: &DMatrix<f64>,
    params: &MarketParams,
) -> Result<DMatrix<f64>> {
    check_pair(theta, dw, params.d)?;
    let shift = theta * &params.rho * params.delta_t;
    Ok(dw + shift)
}

/// Cumulative sums of `N x d` increments, `(N+1) x d` with a zero first row.
pub fn cumulate(increments: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = increments.shape();
    let mut out = DMatrix::zeros(n + 1, d);
    for k in 0..n {
        for i in 0..d {
            out[(k + 1, i)] = out[(k, i)] + increments[(k, i)];
        }
    }
    out
}

/// `gamma_{t_n} = exp{-n (1-m) r dt}` and `H = gamma Z`.
pub fn discount_and_density(
    params: &MarketParams,
    z: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let rate = (1.0 - params.m) * params.r * params.delta_t;
    let gamma = DVector::from_fn(z.len(), |n, _| (-(n as f64) * rate).exp());
    let h = gamma.component_mul(z);
    (gamma, h)
}

/// `zeta_{t_n} = exp{-sum theta^' dW~ + 1/2 sum theta^' rho theta^ dt}` for an
/// observable risk process.
pub fn zeta_projection(
    theta_hat: &DMatrix<f64>,
    dw_tilde: &DMatrix<f64>,
    params: &MarketParams,
) -> Result<DVector<f64>> {
    check_pair(theta_hat, dw_tilde, params.d)?;
    let n_steps = theta_hat.nrows();
    let mut zeta = DVector::zeros(n_steps + 1);
    zeta[0] = 1.0;
    let mut log_z = 0.0;
    for n in 0..n_steps {
        let th = row(theta_hat, n);
        log_z += -th.dot(&row(dw_tilde, n)) + 0.5 * quad_form(&th, &params.rho, &th) * params.delta_t;
        let v = log_z.exp();
        if !log_z.is_finite() || !v.is_finite() || v == 0.0 {
            return Err(Error::Overflow {
                quantity: "zeta",
                step: n + 1,
            });
        }
        zeta[n + 1] = v;
    }
    Ok(zeta)
}

/// Agreement of `zeta` with `Delta(1/zeta) = (1/zeta) theta^' Delta W~`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZetaRecursionCheck {
    /// Largest `|1/zeta_rec - 1/zeta| * zeta` over the grid, with `1/zeta_rec`
    /// the product of the one-step recursion factors.
    pub max_rel_gap: f64,
    /// Largest one-step residual
    /// `|zeta_n Delta(1/zeta_n) - theta^_n' Delta W~_n|`.
    pub max_step_residual: f64,
}

pub fn zeta_recursion_check(
    theta_hat: &DMatrix<f64>,
    dw_tilde: &DMatrix<f64>,
    zeta: &DVector<f64>,
) -> ZetaRecursionCheck {
    let mut inv_rec = 1.0;
    let mut max_rel_gap: f64 = 0.0;
    let mut max_step_residual: f64 = 0.0;
    for n in 0..theta_hat.nrows() {
        let x = row(theta_hat, n).dot(&row(dw_tilde, n));
        inv_rec *= 1.0 + x;
        max_rel_gap = max_rel_gap.max((inv_rec - 1.0 / zeta[n + 1]).abs() * zeta[n + 1]);
        let step = (1.0 / zeta[n + 1] - 1.0 / zeta[n]) * zeta[n];
        max_step_residual = max_step_residual.max((step - x).abs());
    }
    ZetaRecursionCheck {
        max_rel_gap,
        max_step_residual,
    }
}

/// Measure-change quantities along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureState {
    /// `N x d` relative risk.
    pub theta: DMatrix<f64>,
    /// `N+1` exponential martingale.
    pub z: DVector<f64>,
    /// `(N+1) x d` Brownian motion under the tilted measure.
    pub w_tilde: DMatrix<f64>,
    pub gamma: DVector<f64>,
    /// State price density `gamma Z`.
    pub h: DVector<f64>,
    /// Steps where `theta` hit the cap.
    pub capped_steps: usize,
}

impl MeasureState {
    pub fn build(
        theta: DMatrix<f64>,
        dw: &DMatrix<f64>,
        params: &MarketParams,
        capped_steps: usize,
    ) -> Result<Self> {
        let z = exponential_martingale(&theta, dw, params)?;
        let w_tilde = cumulate(&change_measure(&theta, dw, params)?);
        let (gamma, h) = discount_and_density(params, &z);
        Ok(Self {
            theta,
            z,
            w_tilde,
            gamma,
            h,
            capped_steps,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.theta.nrows()
    }

    pub fn dw_tilde(&self) -> DMatrix<f64> {
        let (rows, d) = self.w_tilde.shape();
        DMatrix::from_fn(rows - 1, d, |n, i| {
            self.w_tilde[(n + 1, i)] - self.w_tilde[(n, i)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(sigma: f64) -> MarketParams {
        MarketParams::single_asset(sigma, 0.08, 1, 1.0 / 252.0)
    }

    #[test]
    fn zero_premium_zero_risk() {
        let t = relative_risk(&DVector::zeros(1), &one(0.2)).unwrap();
        assert_eq!(t[0], 0.0);
    }

    #[test]
    fn scalar_relative_risk() {
        let t = relative_risk(&DVector::from_element(1, 0.08), &one(0.2)).unwrap();
        assert!((t[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn relative_risk_round_trip_both_conventions() {
        let mut p = one(0.2);
        p.d = 2;
        p.sigma = DMatrix::from_row_slice(2, 2, &[0.2, 0.03, -0.05, 0.3]);
        p.rho = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let b = DVector::from_vec(vec![0.07, -0.02]);
        let t = relative_risk(&b, &p).unwrap();
        assert!((&p.sigma * &p.rho * &t - &b).abs().max() < 1e-12);
        let t = relative_risk_with(&b, &p, Convention::Literal).unwrap();
        assert!((&p.rho * &p.sigma * &t - &b).abs().max() < 1e-12);
    }

    #[test]
    fn relative_risk_singular() {
        assert!(matches!(
            relative_risk(&DVector::from_element(1, 0.1), &one(0.0)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn no_tilt_no_change() {
        let p = MarketParams::single_asset(0.2, 0.0, 5, 0.1);
        let th = DMatrix::zeros(5, 1);
        let dw = DMatrix::from_fn(5, 1, |n, _| 0.1 * n as f64 - 0.2);
        let z = exponential_martingale(&th, &dw, &p).unwrap();
        assert!(z.iter().all(|&v| v == 1.0));
        assert_eq!(change_measure(&th, &dw, &p).unwrap(), dw);
        let zeta = zeta_projection(&th, &dw, &p).unwrap();
        assert!(zeta.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn one_step_hand_values() {
        let p = one(0.2);
        let th = DMatrix::from_element(1, 1, 0.4);
        let dw = DMatrix::from_element(1, 1, 0.01);
        let z = exponential_martingale(&th, &dw, &p).unwrap();
        let expect = (-0.004f64 - 0.5 * 0.16 / 252.0).exp();
        assert!((z[1] - expect).abs() < 1e-15);
        assert!((z[1] - (-0.0043175f64).exp()).abs() < 1e-7);
        let wt = change_measure(&th, &dw, &p).unwrap();
        assert!((wt[(0, 0)] - (0.01 + 0.4 / 252.0)).abs() < 1e-16);
        assert!((wt[(0, 0)] - 0.01 - 0.0015873).abs() < 1e-7);
    }

    #[test]
    fn overflow_reports_step() {
        let p = MarketParams::single_asset(0.2, 0.0, 3, 1.0);
        let th = DMatrix::from_element(3, 1, 1e200);
        let dw = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(
            exponential_martingale(&th, &dw, &p),
            Err(Error::Overflow { quantity: "Z", step: 1 })
        ));
    }

    #[test]
    fn discount_cases() {
        let mut p = MarketParams::single_asset(0.2, 0.0, 252, 1.0 / 252.0);
        let z = DVector::from_element(253, 1.0);
        p.m = 1.0;
        p.r = 0.05;
        assert!(discount_and_density(&p, &z).0.iter().all(|&g| g == 1.0));
        p.m = 0.3;
        p.r = 0.0;
        assert!(discount_and_density(&p, &z).0.iter().all(|&g| g == 1.0));
        p.m = 0.2;
        p.r = 0.05;
        let (g, h) = discount_and_density(&p, &z);
        assert!((g[252] - (-0.04f64).exp()).abs() < 1e-12);
        assert!((g[252] - 0.960789).abs() < 1e-6);
        assert!(g.as_slice().windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(g, h);
    }

    #[test]
    fn theta_cap_applies() {
        let mut t = DVector::from_vec(vec![30.0, 40.0]);
        assert!(cap_theta(&mut t, 10.0));
        assert!((t.norm() - 10.0).abs() < 1e-12);
        assert!((t[0] - 6.0).abs() < 1e-12);
    }
}
