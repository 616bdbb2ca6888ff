//! Wealth recursion with slippage, discounted wealth and realised volatility.
//!
//! The cash form `X' = X + (1-m) r X dt + P' diag(f) dF - 1/2 c' diag(f) |dP|`
//! drives the ledger. The relative form
//! `X' = X + (1-m) r X dt + X pi' (dR - c_tilde dt)` is evaluated alongside on
//! every step where the relative cost is defined and the largest gap between
//! the two is kept in the ledger.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::FilterHistory;
use crate::market::{MarketParams, PathState};
use crate::measure::MeasureState;
use crate::policy::{Observation, Policy};
use crate::trading::{relative_cost_component, Rounding, TradingConfig};

pub const DEFAULT_VOL_WINDOW: usize = 20;

/// Relative form with the return written as `beta dt + sigma dW`.
pub fn step_wealth(
    x: f64,
    pi: &DVector<f64>,
    beta: &DVector<f64>,
    c_tilde: &DVector<f64>,
    dw: &DVector<f64>,
    params: &MarketParams,
) -> f64 {
    let delta_r = beta * params.delta_t + &params.sigma * dw;
    step_wealth_returns(x, pi, &delta_r, c_tilde, params)
}

/// Relative form driven by an observed return increment.
pub fn step_wealth_returns(
    x: f64,
    pi: &DVector<f64>,
    delta_r: &DVector<f64>,
    c_tilde: &DVector<f64>,
    params: &MarketParams,
) -> f64 {
    let dt = params.delta_t;
    let gain: f64 = (0..pi.len())
        .map(|i| pi[i] * (delta_r[i] - c_tilde[i] * dt))
        .sum();
    x + params.interest_per_step() * x + x * gain
}

/// Cash form: P&L in currency less half the spread on every traded contract.
pub fn step_wealth_cash(
    x: f64,
    positions: &DVector<f64>,
    delta_f: &DVector<f64>,
    trades: &DVector<f64>,
    params: &MarketParams,
) -> f64 {
    let mut pnl = 0.0;
    let mut cost = 0.0;
    for i in 0..positions.len() {
        pnl += positions[i] * params.f[i] * delta_f[i];
        cost += 0.5 * params.c_spread[i] * params.f[i] * trades[i].abs();
    }
    x + params.interest_per_step() * x + pnl - cost
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    pub trading: TradingConfig,
    /// Window (steps) for realised volatility of monetary returns; 0 disables.
    pub vol_window: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            trading: TradingConfig::default(),
            vol_window: DEFAULT_VOL_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEvent {
    /// Target position exceeded the orderbook cap.
    Clip { step: usize, asset: usize },
    /// Trade into a sub-contract position, charged in cash only.
    CashOnlyCost { step: usize, asset: usize },
    /// Price floor bound while simulating the path.
    PriceFloor { step: usize, asset: usize },
    /// Wealth went negative; the path is absorbed at zero from here on.
    Admissibility { step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WealthLedger {
    pub policy: String,
    pub times: DVector<f64>,
    /// `N+1` wealth values.
    pub x: DVector<f64>,
    /// `N x d` weights returned by the policy.
    pub pi_hist: DMatrix<f64>,
    /// `N x d` weights actually held, `P C / X`, after gearing, rounding and caps.
    pub effective_weights: DMatrix<f64>,
    pub p_hist: DMatrix<f64>,
    pub trades: DMatrix<f64>,
    pub contract_prices: DMatrix<f64>,
    /// `N x d` relative cost; NaN where the trade was charged in cash only.
    pub cost_hist: DMatrix<f64>,
    pub cash_cost_hist: DMatrix<f64>,
    pub events: Vec<LedgerEvent>,
    /// First step whose end-of-step wealth was negative.
    pub dead_at: Option<usize>,
    /// Largest `|X_rel - X_cash| / X_n` over steps where both forms apply.
    pub form_gap: f64,
    /// `N+1` annualised realised volatility of `dX/X`; NaN inside the first window.
    pub realized_vol: DVector<f64>,
}

impl WealthLedger {
    pub fn n_steps(&self) -> usize {
        self.pi_hist.nrows()
    }

    pub fn terminal(&self) -> f64 {
        self.x[self.x.len() - 1]
    }

    pub fn clip_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, LedgerEvent::Clip { .. }))
            .count()
    }
}

/// Run `policy` along `path`. The policy sees prices, wealth, held positions
/// and, when it asks for it, the filter output; nothing latent.
pub fn run_backtest(
    path: &PathState,
    filter: Option<&FilterHistory>,
    policy: &mut dyn Policy,
    params: &MarketParams,
    cfg: &BacktestConfig,
    x0: f64,
) -> Result<WealthLedger> {
    let d = params.d;
    let n_steps = path.n_steps();
    if path.dim() != d {
        return Err(Error::shape("path dimension differs from params.d"));
    }
    if !(x0 > 0.0 && x0.is_finite()) {
        return Err(Error::param("x0", "initial wealth must be positive"));
    }
    cfg.trading.validate(d)?;
    if policy.uses_filter() {
        match filter {
            None => {
                return Err(Error::Domain(format!(
                    "policy {} needs the drift filter",
                    policy.name()
                )))
            }
            Some(h) if h.n_steps() != n_steps => {
                return Err(Error::shape("filter history and path lengths differ"))
            }
            _ => {}
        }
    }

    let dt = params.delta_t;
    let interest = params.interest_per_step();
    let mut x = DVector::zeros(n_steps + 1);
    x[0] = x0;
    let mut pi_hist = DMatrix::zeros(n_steps, d);
    let mut eff = DMatrix::zeros(n_steps, d);
    let mut p_hist = DMatrix::zeros(n_steps, d);
    let mut trades = DMatrix::zeros(n_steps, d);
    let mut cprices = DMatrix::zeros(n_steps, d);
    let mut cost_hist = DMatrix::zeros(n_steps, d);
    let mut cash_hist = DMatrix::zeros(n_steps, d);
    let mut events: Vec<LedgerEvent> = path
        .diagnostics
        .floor_events
        .iter()
        .map(|e| LedgerEvent::PriceFloor { step: e.step, asset: e.asset })
        .collect();
    let mut dead_at = None;
    let mut form_gap: f64 = 0.0;

    let mut price = DVector::zeros(d);
    let mut cprice = DVector::zeros(d);
    let mut held = DVector::zeros(d);
    let mut pi = DVector::zeros(d);
    let mut beta_hat = DVector::zeros(d);
    let mut p_cov = DMatrix::zeros(d, d);

    for n in 0..n_steps {
        let wealth = x[n];
        if dead_at.is_some() {
            x[n + 1] = 0.0;
            continue;
        }
        for i in 0..d {
            price[i] = path.prices[(n, i)];
            if !(price[i] > 0.0) {
                return Err(Error::Domain(format!("non-positive price at step {n}")));
            }
            cprice[i] = params.f[i] * price[i];
        }
        let filtered = if policy.uses_filter() {
            let h = filter.expect("checked above");
            for i in 0..d {
                beta_hat[i] = h.beta_hat[(n, i)];
            }
            p_cov.copy_from(&h.p_cov[n]);
            true
        } else {
            false
        };
        let obs = Observation {
            step: n,
            time: path.times[n],
            prices: &price,
            contract_prices: &cprice,
            beta_hat: filtered.then_some(&beta_hat),
            p_cov: filtered.then_some(&p_cov),
            wealth,
            positions: &held,
        };
        policy.weights(&obs, &mut pi)?;
        if pi.len() != d || pi.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain(format!(
                "policy {} returned invalid weights at step {n}",
                policy.name()
            )));
        }

        let mut pnl = 0.0;
        let mut cash_cost = 0.0;
        let mut rel_gain = 0.0;
        let mut rel_defined = true;
        for i in 0..d {
            let mut p = wealth * params.k[i] * pi[i] / cprice[i];
            if cfg.trading.rounding == Rounding::TowardZero {
                p = p.trunc();
            }
            if let Some(caps) = &cfg.trading.caps {
                if p.abs() > caps[i] {
                    p = caps[i].copysign(p);
                    events.push(LedgerEvent::Clip { step: n, asset: i });
                }
            }
            let trade = p - held[i];
            let cash = 0.5 * params.c_spread[i] * params.f[i] * trade.abs();
            let rel = relative_cost_component(
                params.c_spread[i],
                params.f[i],
                trade,
                p,
                cprice[i],
                dt,
                cfg.trading.min_relative_position,
            );
            let w_eff = p * cprice[i] / wealth;
            match rel {
                Some(c) => {
                    cost_hist[(n, i)] = c;
                    let dr = path.returns[(n + 1, i)] - path.returns[(n, i)];
                    rel_gain += w_eff * (dr - c * dt);
                }
                None => {
                    cost_hist[(n, i)] = f64::NAN;
                    rel_defined = false;
                    events.push(LedgerEvent::CashOnlyCost { step: n, asset: i });
                }
            }
            pnl += p * params.f[i] * (path.prices[(n + 1, i)] - price[i]);
            cash_cost += cash;

            pi_hist[(n, i)] = pi[i];
            eff[(n, i)] = w_eff;
            p_hist[(n, i)] = p;
            trades[(n, i)] = trade;
            cprices[(n, i)] = cprice[i];
            cash_hist[(n, i)] = cash;
            held[i] = p;
        }

        let next = wealth + interest * wealth + pnl - cash_cost;
        if rel_defined {
            let rel = wealth + interest * wealth + wealth * rel_gain;
            form_gap = form_gap.max((rel - next).abs() / wealth);
        }
        if next < 0.0 || !next.is_finite() {
            events.push(LedgerEvent::Admissibility { step: n });
            dead_at = Some(n);
            x[n + 1] = 0.0;
            held.fill(0.0);
        } else {
            x[n + 1] = next;
        }
    }

    let realized_vol = realized_volatility(&x, dt, cfg.vol_window);
    Ok(WealthLedger {
        policy: policy.name(),
        times: path.times.clone(),
        x,
        pi_hist,
        effective_weights: eff,
        p_hist,
        trades,
        contract_prices: cprices,
        cost_hist,
        cash_cost_hist: cash_hist,
        events,
        dead_at,
        form_gap,
        realized_vol,
    })
}

/// Annualised sample volatility of `X_{k+1}/X_k - 1` over the trailing
/// `window` steps ending at each grid point.
pub fn realized_volatility(x: &DVector<f64>, delta_t: f64, window: usize) -> DVector<f64> {
    let mut out = DVector::from_element(x.len(), f64::NAN);
    if window < 2 || x.len() <= window {
        return out;
    }
    let rets: Vec<f64> = (0..x.len() - 1)
        .map(|k| if x[k] > 0.0 { x[k + 1] / x[k] - 1.0 } else { 0.0 })
        .collect();
    for end in window..=rets.len() {
        let w = &rets[end - window..end];
        let mean = w.iter().sum::<f64>() / window as f64;
        let var = w.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (window - 1) as f64;
        out[end] = (var / delta_t).sqrt();
    }
    out
}

/// `(gamma X, H X)` on the shared grid.
pub fn discounted_series(
    ledger: &WealthLedger,
    measure: &MeasureState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if ledger.x.len() != measure.h.len() {
        return Err(Error::shape(format!(
            "ledger has {} grid points, measure has {}",
            ledger.x.len(),
            measure.h.len()
        )));
    }
    Ok((
        ledger.x.component_mul(&measure.gamma),
        ledger.x.component_mul(&measure.h),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::simulate_path;
    use crate::policy::{ConstantPolicy, PolicySpec, ReplayPolicy, ZeroPolicy};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn one_step_examples() {
        let mut p = MarketParams::single_asset(1.0, 0.08, 1, 1.0 / 252.0);
        let x = step_wealth(1.0, &v(&[1.0]), &v(&[0.08]), &v(&[0.0]), &v(&[0.01]), &p);
        assert!((x - (1.0 + 0.08 / 252.0 + 0.01)).abs() < 1e-15);
        assert!((x - 1.01031746).abs() < 1e-8);

        p.m = 1.0;
        p.r = 0.04;
        let x = step_wealth(5.0, &v(&[0.0]), &v(&[0.08]), &v(&[0.0]), &v(&[0.01]), &p);
        assert_eq!(x, 5.0);

        p.m = 0.0;
        let x = step_wealth(1.0, &v(&[0.0]), &v(&[0.08]), &v(&[0.0]), &v(&[0.01]), &p);
        assert!((x - (1.0 + 0.04 / 252.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_policy_with_full_margin_keeps_wealth() {
        let mut p = MarketParams::single_asset(0.2, 0.08, 50, 0.01);
        p.m = 1.0;
        p.r = 0.05;
        let path = simulate_path(&p, 1).unwrap();
        let l = run_backtest(&path, None, &mut ZeroPolicy, &p, &BacktestConfig::default(), 1e6).unwrap();
        assert_eq!(l.terminal(), 1e6);
        assert!(l.x.iter().all(|&x| x == 1e6));
    }

    #[test]
    fn constant_policy_on_noiseless_path() {
        let mut p = MarketParams::single_asset(0.0, 0.1, 100, 0.01);
        p.r = 0.03;
        p.m = 0.2;
        let path = simulate_path(&p, 0).unwrap();
        let mut pol = ConstantPolicy { weights: v(&[1.5]) };
        let l = run_backtest(&path, None, &mut pol, &p, &BacktestConfig::default(), 1e6).unwrap();
        let growth: f64 = 1.0 + 0.8 * 0.03 * 0.01 + 1.5 * 0.1 * 0.01;
        for n in 0..=100 {
            let expect = 1e6 * growth.powi(n as i32);
            assert!((l.x[n] - expect).abs() <= 1e-12 * expect, "step {n}");
        }
    }

    #[test]
    fn linear_in_initial_wealth() {
        let mut p = MarketParams::single_asset(0.3, 0.05, 200, 0.01);
        p.c_spread[0] = 0.2;
        p.f[0] = 10.0;
        let path = simulate_path(&p, 5).unwrap();
        let spec = PolicySpec::RandomBounded { bound: 2.0 };
        let run = |x0| {
            let mut pol = spec.build(&p, 5, 0).unwrap();
            run_backtest(&path, None, pol.as_mut(), &p, &BacktestConfig::default(), x0).unwrap()
        };
        let (a, b) = (run(1e5), run(2e5));
        for n in 0..=200 {
            assert_eq!(b.x[n], 2.0 * a.x[n]);
        }
    }

    #[test]
    fn cash_only_cost_for_tiny_positions() {
        let mut p = MarketParams::single_asset(0.2, 0.05, 3, 0.01);
        p.c_spread[0] = 0.5;
        let path = simulate_path(&p, 2).unwrap();
        // 0.1% of 100 at price ~100 is a fraction of a contract
        let mut pol = ConstantPolicy { weights: v(&[0.001]) };
        let l = run_backtest(&path, None, &mut pol, &p, &BacktestConfig::default(), 100.0).unwrap();
        assert!(l.cost_hist[(0, 0)].is_nan());
        assert!(l.cash_cost_hist[(0, 0)] > 0.0);
        assert!(l.events.contains(&LedgerEvent::CashOnlyCost { step: 0, asset: 0 }));
    }

    #[test]
    fn forms_agree_along_a_path() {
        let mut p = MarketParams::single_asset(0.25, 0.05, 300, 1.0 / 252.0);
        p.c_spread[0] = 0.25;
        p.f[0] = 50.0;
        p.r = 0.02;
        p.m = 0.1;
        let path = simulate_path(&p, 8).unwrap();
        let mut pol = PolicySpec::RandomBounded { bound: 3.0 }.build(&p, 8, 0).unwrap();
        let l = run_backtest(&path, None, pol.as_mut(), &p, &BacktestConfig::default(), 1e7).unwrap();
        assert!(l.form_gap < 1e-10, "gap {}", l.form_gap);
    }

    #[test]
    fn caps_clip_and_record() {
        let p = MarketParams::single_asset(0.2, 0.05, 5, 0.01);
        let path = simulate_path(&p, 3).unwrap();
        let cfg = BacktestConfig {
            trading: TradingConfig { caps: Some(v(&[10.0])), ..Default::default() },
            ..Default::default()
        };
        let mut pol = ConstantPolicy { weights: v(&[5.0]) };
        let l = run_backtest(&path, None, &mut pol, &p, &cfg, 1e6).unwrap();
        assert!(l.p_hist.iter().all(|q| q.abs() <= 10.0));
        assert_eq!(l.clip_count(), 5);
    }

    #[test]
    fn negative_wealth_absorbs() {
        let mut p = MarketParams::single_asset(0.0, -0.5, 10, 0.5);
        p.beta0[0] = -5.0;
        let path = simulate_path(&p, 0).unwrap();
        let mut pol = ConstantPolicy { weights: v(&[2.0]) };
        let l = run_backtest(&path, None, &mut pol, &p, &BacktestConfig::default(), 1.0).unwrap();
        assert_eq!(l.dead_at, Some(0));
        assert!(l.x.iter().all(|&x| x >= 0.0));
        assert_eq!(l.terminal(), 0.0);
    }

    #[test]
    fn discounted_series_trivial_measure() {
        let p = MarketParams::single_asset(0.2, 0.05, 20, 0.01);
        let path = simulate_path(&p, 4).unwrap();
        let mut pol = ConstantPolicy { weights: v(&[1.0]) };
        let l = run_backtest(&path, None, &mut pol, &p, &BacktestConfig::default(), 1.0).unwrap();
        let dw = path.latent.as_ref().unwrap().dw.clone();
        let m = MeasureState::build(DMatrix::zeros(20, 1), &dw, &p, 0).unwrap();
        let (gx, hx) = discounted_series(&l, &m).unwrap();
        assert_eq!(hx, l.x);
        assert_eq!(gx, l.x);
    }

    #[test]
    fn realized_vol_of_constant_growth_is_zero() {
        let x = DVector::from_fn(30, |n, _| 1.01f64.powi(n as i32));
        let vol = realized_volatility(&x, 0.01, 20);
        assert!(vol[19].is_nan());
        assert!(vol[29].abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn more_spread_never_helps(seed in 0u64..1000, c in 0.0f64..1.0, extra in 0.0f64..1.0) {
            let mut p = MarketParams::single_asset(0.3, 0.05, 60, 0.01);
            p.f[0] = 20.0;
            let path = simulate_path(&p, seed).unwrap();
            let weights = DMatrix::from_fn(60, 1, |n, _| ((n * 7 + seed as usize) % 5) as f64 - 2.0);
            let run = |spread: f64| {
                let mut q = p.clone();
                q.c_spread[0] = spread;
                let mut pol = ReplayPolicy { weights: weights.clone() };
                run_backtest(&path, None, &mut pol, &q, &BacktestConfig::default(), 1e6).unwrap().terminal()
            };
            prop_assert!(run(c + extra) <= run(c));
        }
    }
}
