//! Utility functions, Legendre conjugates and the optimal terminal wealth
//! `xi = I(Y(x) H_N)`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::quad_form;
use crate::market::MarketParams;
use crate::measure::MeasureState;
use crate::montecarlo::MeanVar;

pub trait Utility: Send + Sync {
    fn name(&self) -> String;
    fn value(&self, x: f64) -> f64;
    /// `U'(x)`.
    fn marginal(&self, x: f64) -> f64;
    /// `I = (U')^-1`.
    fn inverse_marginal(&self, y: f64) -> f64;

    /// `U~(y) = sup_x U(x) - x y = U(I(y)) - I(y) y`.
    fn conjugate(&self, y: f64) -> Result<f64> {
        check_positive(y)?;
        let x = self.inverse_marginal(y);
        Ok(self.value(x) - x * y)
    }

    /// `(alpha, nu)` with `0 <= U(x) <= alpha (1 + x^nu)`, when such a bound holds.
    fn growth_bound(&self) -> Option<(f64, f64)> {
        None
    }

    /// `X(y) = E[H I(y H)]` when it does not depend on the law of `H`.
    fn big_x_closed_form(&self, _y: f64) -> Option<f64> {
        None
    }
}

fn check_positive(y: f64) -> Result<()> {
    if y > 0.0 && y.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("conjugate needs y > 0, got {y}")))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LogUtility;

impl Utility for LogUtility {
    fn name(&self) -> String {
        "log".into()
    }

    fn value(&self, x: f64) -> f64 {
        x.ln()
    }

    fn marginal(&self, x: f64) -> f64 {
        1.0 / x
    }

    fn inverse_marginal(&self, y: f64) -> f64 {
        1.0 / y
    }

    fn conjugate(&self, y: f64) -> Result<f64> {
        check_positive(y)?;
        Ok(-y.ln() - 1.0)
    }

    fn big_x_closed_form(&self, y: f64) -> Option<f64> {
        Some(1.0 / y)
    }
}

/// `U(x) = x^delta / delta`, `0 < delta < 1`.
#[derive(Debug, Clone, Copy)]
pub struct PowerUtility {
    delta: f64,
}

impl PowerUtility {
    pub fn new(delta: f64) -> Result<Self> {
        if delta > 0.0 && delta < 1.0 {
            Ok(Self { delta })
        } else {
            Err(Error::param("delta", "must lie in (0,1)"))
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl Utility for PowerUtility {
    fn name(&self) -> String {
        format!("power(delta={})", self.delta)
    }

    fn value(&self, x: f64) -> f64 {
        x.powf(self.delta) / self.delta
    }

    fn marginal(&self, x: f64) -> f64 {
        x.powf(self.delta - 1.0)
    }

    fn inverse_marginal(&self, y: f64) -> f64 {
        y.powf(1.0 / (self.delta - 1.0))
    }

    fn conjugate(&self, y: f64) -> Result<f64> {
        check_positive(y)?;
        let d = self.delta;
        Ok((1.0 - d) / d * y.powf(d / (d - 1.0)))
    }

    fn growth_bound(&self) -> Option<(f64, f64)> {
        Some((1.0 / self.delta, self.delta))
    }
}

/// Brute-force `sup_x U(x) - x y`: a log-spaced scan over `[1e-40, 1e40]`
/// refined by ternary search around the best grid point. Uses `value` only.
pub fn grid_conjugate(u: &dyn Utility, y: f64) -> f64 {
    grid_sup(|x| u.value(x) - x * y, -40.0, 40.0, 8001)
}

fn grid_sup(f: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let at = |k: usize| 10f64.powf(lo + (hi - lo) * k as f64 / (points - 1) as f64);
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for k in 0..points {
        let v = f(at(k));
        if v > best_val {
            best_val = v;
            best = k;
        }
    }
    let (mut a, mut b) = (at(best.saturating_sub(1)), at((best + 1).min(points - 1)));
    // f is concave in x, so ternary search on the bracket converges to the max
    for _ in 0..200 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) < f(m2) {
            a = m1;
        } else {
            b = m2;
        }
    }
    f(0.5 * (a + b)).max(best_val)
}

/// Brute-force biconjugate `inf_y U~(y) + x y`, with `U~` itself from
/// [`grid_conjugate`], scanning `y` over `[1e-12, 1e12]`.
pub fn grid_biconjugate(u: &dyn Utility, x: f64) -> f64 {
    -grid_sup(|y| -(grid_conjugate(u, y) + x * y), -12.0, 12.0, 241)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error or violation count, depending on the check.
    pub worst: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub utility: String,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
        .collect()
}

fn check(name: &str, worst: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: worst <= tolerance,
        worst,
        tolerance,
    }
}

/// Runs the utility battery: monotonicity, concavity, Inada surrogates,
/// `U'(I(y)) = y`, finite-difference gradient, conjugate vs grid supremum,
/// both conjugate inequalities on a 100 x 100 grid and the growth bound.
pub fn validate_utility(u: &dyn Utility) -> ValidationReport {
    let xs = log_grid(1e-3, 1e3, 100);
    let ys = log_grid(1e-3, 1e3, 100);
    let mut checks = Vec::new();

    let dense = log_grid(1e-6, 1e6, 400);
    let not_increasing = dense
        .windows(2)
        .filter(|w| !(u.value(w[1]) > u.value(w[0])))
        .count();
    checks.push(check("monotone", not_increasing as f64, 0.0));
    let not_concave = dense
        .windows(3)
        .filter(|w| {
            let s1 = (u.value(w[1]) - u.value(w[0])) / (w[1] - w[0]);
            let s2 = (u.value(w[2]) - u.value(w[1])) / (w[2] - w[1]);
            !(s2 < s1)
        })
        .count();
    checks.push(check("concave", not_concave as f64, 0.0));

    // marginal above 1e6 near zero and below 1e-6 far out, probing from 1e-8
    // and 1e8 outward so slowly varying utilities still register
    let probes = [8, 16, 32, 64, 128, 300];
    let inada = probes.iter().any(|&e| u.marginal(10f64.powi(-e)) > 1e6)
        && probes.iter().any(|&e| u.marginal(10f64.powi(e)) < 1e-6);
    checks.push(check("inada", if inada { 0.0 } else { 1.0 }, 0.0));

    let inverse = log_grid(1e-4, 1e4, 200)
        .into_iter()
        .map(|y| (u.marginal(u.inverse_marginal(y)) - y).abs() / y)
        .fold(0.0, f64::max);
    checks.push(check("inverse_marginal", inverse, 1e-10));

    let gradient = xs
        .iter()
        .map(|&x| {
            let h = 1e-5 * x;
            let fd = (u.value(x + h) - u.value(x - h)) / (2.0 * h);
            (fd - u.marginal(x)).abs() / u.marginal(x).abs()
        })
        .fold(0.0, f64::max);
    checks.push(check("finite_difference_marginal", gradient, 1e-6));

    let conj = log_grid(1e-2, 1e2, 40)
        .into_iter()
        .map(|y| {
            let exact = u.conjugate(y).unwrap_or(f64::NAN);
            let brute = grid_conjugate(u, y);
            (exact - brute).abs() / exact.abs().max(1.0)
        })
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    checks.push(check("conjugate_vs_grid", conj, 1e-6));

    // U(I(y)) >= U(x) + y (I(y) - x) and U(x) <= U~(y) + x y, up to rounding
    let mut first = 0usize;
    let mut second = 0usize;
    for &y in &ys {
        let iy = u.inverse_marginal(y);
        let uiy = u.value(iy);
        let conj = u.conjugate(y).unwrap_or(f64::NAN);
        for &x in &xs {
            let ux = u.value(x);
            let rhs = ux + y * (iy - x);
            let slack = 1e-12 * (1.0 + uiy.abs() + rhs.abs() + (y * x).abs());
            if !(uiy >= rhs - slack) {
                first += 1;
            }
            let bound = conj + x * y;
            if !(ux <= bound + 1e-12 * (1.0 + bound.abs() + ux.abs())) {
                second += 1;
            }
        }
    }
    checks.push(check("conjugate_inequality_tangent", first as f64, 0.0));
    checks.push(check("conjugate_inequality_fenchel", second as f64, 0.0));

    if let Some((alpha, nu)) = u.growth_bound() {
        let violations = dense
            .iter()
            .filter(|&&x| {
                let v = u.value(x);
                !(v >= 0.0 && v <= alpha * (1.0 + x.powf(nu)))
            })
            .count();
        checks.push(check("growth", violations as f64, 0.0));
    }

    ValidationReport {
        utility: u.name(),
        checks,
    }
}

/// Monte Carlo `X(y) = E[H I(y H)]` with its standard error. Utilities with a
/// closed form return it exactly with zero standard error.
pub fn big_x(y: f64, h_samples: &[f64], u: &dyn Utility) -> Result<(f64, f64)> {
    if h_samples.is_empty() {
        return Err(Error::EmptySample);
    }
    check_positive(y)?;
    if let Some(v) = u.big_x_closed_form(y) {
        return Ok((v, 0.0));
    }
    if h_samples.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Domain("state price density samples must be positive".into()));
    }
    let mut acc = MeanVar::new();
    for &h in h_samples {
        acc.push(h * u.inverse_marginal(y * h));
    }
    Ok((acc.mean, acc.stderr()))
}

/// Solves `X(y) = x0` for the multiplier `Y(x0)` by bisection on `log y`
/// over `[1e-12, 1e12]`.
pub fn dual_multiplier(x0: f64, h_samples: &[f64], u: &dyn Utility) -> Result<f64> {
    if !(x0 > 0.0) {
        return Err(Error::param("x0", "initial wealth must be positive"));
    }
    let (lo, hi) = (1e-12f64, 1e12f64);
    let big = |y: f64| big_x(y, h_samples, u).map(|(m, _)| m);
    let (x_lo, x_hi) = (big(lo)?, big(hi)?);
    if !(x_lo >= x0 && x_hi <= x0) {
        return Err(Error::NoBracket { target: x0, lo, hi, x_lo, x_hi });
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    // relative tolerance 1e-10 on y is an absolute one on log y
    while b - a > 1e-10 {
        let mid = 0.5 * (a + b);
        if big(mid.exp())? > x0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// `xi = I(Y(x0) H)` per sample, with the multiplier used.
pub fn optimal_terminal_wealth(
    x0: f64,
    h_samples: &[f64],
    u: &dyn Utility,
) -> Result<(f64, Vec<f64>)> {
    let y = dual_multiplier(x0, h_samples, u)?;
    Ok((y, h_samples.iter().map(|&h| u.inverse_marginal(y * h)).collect()))
}

/// Log-utility closed forms along one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogClosedForm {
    /// `x0 exp{sum [(1-m) r + 1/2 theta' rho theta] dt + sum theta' dW}`.
    pub xi: f64,
    /// `log x0 + sum [(1-m) r + 1/2 theta' rho theta] dt`, the expectation of `log xi`.
    pub value_half: f64,
    /// `log x0 + sum [(1-m) r + theta' rho theta] dt`, without the one half.
    pub value_printed: f64,
}

/// Closed forms from the measure quantities of one path. `dW` is recovered
/// from `dW~ - rho theta dt`.
pub fn log_optimal_closed_forms(
    measure: &MeasureState,
    params: &MarketParams,
    x0: f64,
) -> Result<LogClosedForm> {
    if !(x0 > 0.0) {
        return Err(Error::param("x0", "initial wealth must be positive"));
    }
    let dw_tilde = measure.dw_tilde();
    let theta = &measure.theta;
    let dt = params.delta_t;
    let interest = (1.0 - params.m) * params.r;
    let shift: DMatrix<f64> = theta * &params.rho * dt;
    let mut drift = 0.0;
    let mut quad = 0.0;
    let mut noise = 0.0;
    for n in 0..theta.nrows() {
        let th = theta.row(n).transpose();
        quad += quad_form(&th, &params.rho, &th) * dt;
        drift += interest * dt;
        for i in 0..params.d {
            noise += theta[(n, i)] * (dw_tilde[(n, i)] - shift[(n, i)]);
        }
    }
    let log_x0 = x0.ln();
    Ok(LogClosedForm {
        xi: x0 * (drift + 0.5 * quad + noise).exp(),
        value_half: log_x0 + drift + 0.5 * quad,
        value_printed: log_x0 + drift + quad,
    })
}
