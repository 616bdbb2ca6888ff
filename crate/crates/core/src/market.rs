//! Market coefficients and price, return and latent-drift path generation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, is_nonsingular, is_symmetric};
use crate::rng::{stream_rng, IncrementLaw, Stream};

/// Static model coefficients shared by every module.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    /// Number of futures.
    pub d: usize,
    /// Number of time steps `N`; the grid has `N + 1` points.
    pub n_steps: usize,
    /// Grid spacing in years.
    pub delta_t: f64,
    /// Volatility matrix.
    pub sigma: DMatrix<f64>,
    /// Correlation of the price Brownian motion.
    pub rho: DMatrix<f64>,
    /// Drift mean-reversion matrix.
    pub alpha: DMatrix<f64>,
    /// Drift diffusion matrix.
    pub varsigma: DMatrix<f64>,
    /// Unit value of one price point, in currency.
    pub f: DVector<f64>,
    /// Bid/ask spread in price points.
    pub c_spread: DVector<f64>,
    /// Margin fraction in `[0, 1]`.
    pub m: f64,
    /// Risk-free rate per year.
    pub r: f64,
    /// Gearing weights.
    pub k: DVector<f64>,
    /// Initial prices.
    pub f0: DVector<f64>,
    /// Initial drift.
    pub beta0: DVector<f64>,
}

impl MarketParams {
    /// One asset with unit contract value, no spread, no margin, no interest
    /// and a frozen drift. Convenient starting point for experiments.
    pub fn single_asset(sigma: f64, beta0: f64, n_steps: usize, delta_t: f64) -> Self {
        Self {
            d: 1,
            n_steps,
            delta_t,
            sigma: DMatrix::from_element(1, 1, sigma),
            rho: DMatrix::identity(1, 1),
            alpha: DMatrix::zeros(1, 1),
            varsigma: DMatrix::zeros(1, 1),
            f: DVector::from_element(1, 1.0),
            c_spread: DVector::zeros(1),
            m: 0.0,
            r: 0.0,
            k: DVector::from_element(1, 1.0),
            f0: DVector::from_element(1, 100.0),
            beta0: DVector::from_element(1, beta0),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.delta_t
    }

    /// Simple interest accrued on the unmargined capital over one step.
    pub fn interest_per_step(&self) -> f64 {
        (1.0 - self.m) * self.r * self.delta_t
    }

    /// Structural checks: shapes, finiteness, ranges, and a positive
    /// definite unit-diagonal `rho`. A singular `sigma` is accepted here
    /// (noise-free paths are legitimate simulations); consumers that need
    /// `sigma^-1` reject it themselves, and [`validate_strict`] adds the check.
    ///
    /// [`validate_strict`]: MarketParams::validate_strict
    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 {
            return Err(Error::param("d", "must be at least 1"));
        }
        if self.n_steps == 0 {
            return Err(Error::param("n_steps", "must be at least 1"));
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::param("delta_t", "must be positive and finite"));
        }
        for (name, mat) in [
            ("sigma", &self.sigma),
            ("rho", &self.rho),
            ("alpha", &self.alpha),
            ("varsigma", &self.varsigma),
        ] {
            if mat.nrows() != d || mat.ncols() != d {
                return Err(Error::param(
                    name,
                    format!("must be {d}x{d}, got {}x{}", mat.nrows(), mat.ncols()),
                ));
            }
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::param(name, "entries must be finite"));
            }
        }
        for (name, v) in [
            ("f", &self.f),
            ("c_spread", &self.c_spread),
            ("k", &self.k),
            ("f0", &self.f0),
            ("beta0", &self.beta0),
        ] {
            if v.len() != d {
                return Err(Error::param(name, format!("must have length {d}, got {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::param(name, "entries must be finite"));
            }
        }
        if !is_symmetric(&self.rho, 1e-12) {
            return Err(Error::param("rho", "must be symmetric"));
        }
        if (0..d).any(|i| (self.rho[(i, i)] - 1.0).abs() > 1e-12) {
            return Err(Error::param("rho", "must have unit diagonal"));
        }
        cholesky_lower(&self.rho, "rho")?;
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::param("m", "m must lie in [0,1]"));
        }
        if !self.r.is_finite() {
            return Err(Error::param("r", "must be finite"));
        }
        if self.f.iter().any(|&x| x <= 0.0) {
            return Err(Error::param("f", "unit values must be positive"));
        }
        if self.c_spread.iter().any(|&x| x < 0.0) {
            return Err(Error::param("c_spread", "spreads must be non-negative"));
        }
        if self.k.iter().any(|&x| x <= 0.0) {
            return Err(Error::param("k", "gearing weights must be positive"));
        }
        if self.f0.iter().any(|&x| x <= 0.0) {
            return Err(Error::param("f0", "initial prices must be positive"));
        }
        Ok(())
    }

    /// [`validate`](MarketParams::validate) plus a nonsingular `sigma`.
    pub fn validate_strict(&self) -> Result<()> {
        self.validate()?;
        if !is_nonsingular(&self.sigma) {
            return Err(Error::param("sigma", "must be nonsingular"));
        }
        Ok(())
    }

    pub fn rho_cholesky(&self) -> Result<DMatrix<f64>> {
        cholesky_lower(&self.rho, "rho")
    }
}

/// How `sigma` and `rho` combine in the risk and weight maps.
///
/// With `Delta R = beta dt + sigma dW` and `E[dW dW'] = rho dt`, the return
/// covariance is `sigma rho sigma' dt` and the wealth drift vanishes under the
/// tilted measure exactly when `sigma rho theta = beta - c`. `Consistent`
/// uses those forms; `Literal` uses the untransposed products `rho sigma` and
/// `sigma rho sigma` as printed in the source derivation. Both coincide for
/// one asset or when `sigma` is symmetric and commutes with `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    #[default]
    Consistent,
    Literal,
}

/// Knobs of the path generator that are not market coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimOptions {
    pub increment_law: IncrementLaw,
    /// Lower bound on the one-step price factor `1 + beta dt + sigma dW`.
    pub price_floor: f64,
    /// Fraction of floored (step, asset) pairs above which the path carries a
    /// warning.
    pub max_floor_fraction: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            increment_law: IncrementLaw::Gaussian,
            price_floor: 1e-8,
            max_floor_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FloorEvent {
    pub step: usize,
    pub asset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PathDiagnostics {
    pub floor_events: Vec<FloorEvent>,
    pub floor_fraction: f64,
    pub warning: Option<String>,
}

/// Unobservable components of a simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    /// `(N+1) x d` drift.
    pub beta: DMatrix<f64>,
    /// `N x d` correlated price-noise increments.
    pub dw: DMatrix<f64>,
    /// `N x d` drift-noise increments.
    pub dw2: DMatrix<f64>,
}

/// One trajectory on the grid `t_n = n dt`.
///
/// `latent` is `None` for ingested market data: only prices and returns are
/// ever observable.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub times: DVector<f64>,
    /// `(N+1) x d` futures prices.
    pub prices: DMatrix<f64>,
    /// `(N+1) x d` cumulative returns, `R_0 = 0`.
    pub returns: DMatrix<f64>,
    pub latent: Option<LatentPath>,
    pub diagnostics: PathDiagnostics,
}

impl PathState {
    pub fn n_steps(&self) -> usize {
        self.prices.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.prices.ncols()
    }

    /// `Delta R_{t_n} = R_{t_{n+1}} - R_{t_n}`.
    pub fn delta_r(&self, n: usize) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            self.returns[(n + 1, i)] - self.returns[(n, i)]
        })
    }

    pub fn price(&self, n: usize) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.prices[(n, i)])
    }

    /// Build a path from observed prices alone; returns follow from
    /// `Delta F = F Delta R`.
    pub fn from_prices(times: DVector<f64>, prices: DMatrix<f64>) -> Result<Self> {
        if times.len() != prices.nrows() || prices.nrows() < 2 {
            return Err(Error::shape("need at least two rows and one time per row"));
        }
        let returns = returns_from_prices(&prices)?;
        Ok(Self {
            times,
            prices,
            returns,
            latent: None,
            diagnostics: PathDiagnostics::default(),
        })
    }
}

/// Cumulative returns from prices via `Delta R = Delta F / F`.
pub fn returns_from_prices(prices: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, d) = prices.shape();
    if prices.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::Domain("prices must be positive and finite".into()));
    }
    let mut r = DMatrix::zeros(rows, d);
    for n in 0..rows.saturating_sub(1) {
        for i in 0..d {
            let dr = (prices[(n + 1, i)] - prices[(n, i)]) / prices[(n, i)];
            r[(n + 1, i)] = r[(n, i)] + dr;
        }
    }
    Ok(r)
}

/// Prices from initial prices and cumulative returns: `F_{n+1} = F_n (1 + Delta R_n)`.
pub fn prices_from_returns(f0: &DVector<f64>, returns: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, d) = returns.shape();
    let mut p = DMatrix::zeros(rows, d);
    for i in 0..d {
        p[(0, i)] = f0[i];
    }
    for n in 0..rows.saturating_sub(1) {
        for i in 0..d {
            p[(n + 1, i)] = p[(n, i)] * (1.0 + returns[(n + 1, i)] - returns[(n, i)]);
        }
    }
    p
}

/// `N x d` increments with rows `sqrt(dt) L z`, `L L' = chol`.
pub(crate) fn draw_increments<R: Rng + ?Sized>(
    rng: &mut R,
    chol: Option<&DMatrix<f64>>,
    d: usize,
    delta_t: f64,
    n_steps: usize,
    law: IncrementLaw,
) -> DMatrix<f64> {
    let sd = delta_t.sqrt();
    let mut out = DMatrix::zeros(n_steps, d);
    let mut z = vec![0.0; d];
    for n in 0..n_steps {
        for zi in z.iter_mut() {
            *zi = law.sample(rng);
        }
        match chol {
            Some(l) => {
                for i in 0..d {
                    let mut s = 0.0;
                    for (j, zj) in z.iter().enumerate().take(i + 1) {
                        s += l[(i, j)] * zj;
                    }
                    out[(n, i)] = sd * s;
                }
            }
            None => {
                for i in 0..d {
                    out[(n, i)] = sd * z[i];
                }
            }
        }
    }
    out
}

/// Correlated price-noise increments `dW` with `E[dW dW'] = rho dt`,
/// reproducible from `seed` (path 0 of that seed).
pub fn correlated_increments(
    params: &MarketParams,
    seed: u64,
    n_steps: usize,
) -> Result<DMatrix<f64>> {
    let chol = params.rho_cholesky()?;
    let mut rng = stream_rng(seed, 0, Stream::Price);
    Ok(draw_increments(
        &mut rng,
        Some(&chol),
        params.d,
        params.delta_t,
        n_steps,
        IncrementLaw::Gaussian,
    ))
}

/// Drift recursion `beta_{n+1} = beta_n + alpha beta_n dt + varsigma dW2_n`.
pub fn simulate_drift(params: &MarketParams, dw2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = params.d;
    if dw2.ncols() != d {
        return Err(Error::shape(format!(
            "drift increments have {} columns, expected {d}",
            dw2.ncols()
        )));
    }
    let n_steps = dw2.nrows();
    let dt = params.delta_t;
    let mut beta = DMatrix::zeros(n_steps + 1, d);
    for i in 0..d {
        beta[(0, i)] = params.beta0[i];
    }
    for n in 0..n_steps {
        for i in 0..d {
            let mut next = beta[(n, i)];
            for j in 0..d {
                next += params.alpha[(i, j)] * beta[(n, j)] * dt
                    + params.varsigma[(i, j)] * dw2[(n, j)];
            }
            beta[(n + 1, i)] = next;
        }
    }
    Ok(beta)
}

/// Path 0 of `seed` with default options.
pub fn simulate_path(params: &MarketParams, seed: u64) -> Result<PathState> {
    simulate_path_with(params, &SimOptions::default(), seed, 0)
}

/// Path number `path` of the run seeded with `seed`.
pub fn simulate_path_with(
    params: &MarketParams,
    opts: &SimOptions,
    seed: u64,
    path: u64,
) -> Result<PathState> {
    params.validate()?;
    let d = params.d;
    let n_steps = params.n_steps;
    let dt = params.delta_t;
    let chol = params.rho_cholesky()?;

    let mut price_rng = stream_rng(seed, path, Stream::Price);
    let mut drift_rng = stream_rng(seed, path, Stream::Drift);
    let dw = draw_increments(&mut price_rng, Some(&chol), d, dt, n_steps, opts.increment_law);
    let dw2 = if params.varsigma.iter().all(|&v| v == 0.0) {
        DMatrix::zeros(n_steps, d)
    } else {
        draw_increments(&mut drift_rng, None, d, dt, n_steps, IncrementLaw::Gaussian)
    };
    let beta = simulate_drift(params, &dw2)?;

    let mut prices = DMatrix::zeros(n_steps + 1, d);
    let mut returns = DMatrix::zeros(n_steps + 1, d);
    for i in 0..d {
        prices[(0, i)] = params.f0[i];
    }
    let mut floor_events = Vec::new();
    for n in 0..n_steps {
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += params.sigma[(i, j)] * dw[(n, j)];
            }
            let mut factor = 1.0 + beta[(n, i)] * dt + noise;
            if factor < opts.price_floor {
                factor = opts.price_floor;
                floor_events.push(FloorEvent { step: n, asset: i });
            }
            prices[(n + 1, i)] = prices[(n, i)] * factor;
            // keeps Delta F = F Delta R exact when the floor binds
            returns[(n + 1, i)] = returns[(n, i)] + (factor - 1.0);
        }
    }

    let floor_fraction = floor_events.len() as f64 / (n_steps * d) as f64;
    let warning = (floor_fraction > opts.max_floor_fraction).then(|| {
        format!(
            "price floor bound on {:.3}% of steps (limit {:.3}%)",
            100.0 * floor_fraction,
            100.0 * opts.max_floor_fraction
        )
    });

    Ok(PathState {
        times: DVector::from_fn(n_steps + 1, |n, _| n as f64 * dt),
        prices,
        returns,
        latent: Some(LatentPath { beta, dw, dw2 }),
        diagnostics: PathDiagnostics {
            floor_events,
            floor_fraction,
            warning,
        },
    })
}
