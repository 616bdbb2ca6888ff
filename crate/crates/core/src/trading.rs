//! Weights to futures positions: contract pricing, gearing, orderbook caps
//! and the slippage cost terms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Solver;
use crate::market::{Convention, MarketParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffMode {
    /// `max(b - c, 0) + min(b - c, 0)` evaluated as written.
    Literal,
    /// `sign(b) max(|b| - |c|, 0)`: zero whenever the cost outweighs the drift.
    #[default]
    SoftThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    Fractional,
    /// Whole contracts, rounded toward zero.
    TowardZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradingConfig {
    /// Top-of-book size per asset; `None` leaves positions unbounded.
    pub caps: Option<DVector<f64>>,
    pub rounding: Rounding,
    /// Positions smaller than this (in contracts) are charged slippage in cash
    /// only; the relative cost is undefined there.
    pub min_relative_position: f64,
}

impl Default for TradingConfig {
    fn default() -> Self {
        Self {
            caps: None,
            rounding: Rounding::Fractional,
            min_relative_position: 1.0,
        }
    }
}

impl TradingConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if let Some(c) = &self.caps {
            if c.len() != d {
                return Err(Error::param("caps", format!("must have length {d}")));
            }
            if c.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::param("caps", "must be positive"));
            }
        }
        if !(self.min_relative_position >= 0.0) {
            return Err(Error::param("min_relative_position", "must be non-negative"));
        }
        Ok(())
    }
}

/// `C_i = f_i F_i`.
pub fn contract_price(prices: &DVector<f64>, f: &DVector<f64>) -> Result<DVector<f64>> {
    if prices.len() != f.len() {
        return Err(Error::shape("prices and unit values differ in length"));
    }
    if prices.iter().chain(f.iter()).any(|&x| !(x > 0.0)) {
        return Err(Error::Domain(
            "contract price needs positive prices and unit values".into(),
        ));
    }
    Ok(prices.component_mul(f))
}

/// Target positions with their clip flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTarget {
    pub positions: DVector<f64>,
    pub clipped: Vec<bool>,
}

/// `P_i = X k_i pi_i / C_i`, rounded and clipped to the caps.
pub fn position_from_weights(
    wealth: f64,
    weights: &DVector<f64>,
    contract_prices: &DVector<f64>,
    k: &DVector<f64>,
    cfg: &TradingConfig,
) -> PositionTarget {
    let d = weights.len();
    let mut positions = DVector::zeros(d);
    let mut clipped = vec![false; d];
    for i in 0..d {
        let mut p = wealth * k[i] * weights[i] / contract_prices[i];
        if cfg.rounding == Rounding::TowardZero {
            p = p.trunc();
        }
        if let Some(caps) = &cfg.caps {
            if p.abs() > caps[i] {
                p = caps[i].copysign(p);
                clipped[i] = true;
            }
        }
        positions[i] = p;
    }
    PositionTarget { positions, clipped }
}

/// Relative slippage per asset. Components flagged `cash_only` hold zero and
/// must be charged through the cash form.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeCost {
    pub value: DVector<f64>,
    pub cash_only: Vec<bool>,
}

/// One component of the relative cost, or `None` when the position is too
/// small for the relative form and the trade must be charged in cash.
pub fn relative_cost_component(
    c_spread: f64,
    f: f64,
    trade: f64,
    p_now: f64,
    contract_price: f64,
    delta_t: f64,
    min_position: f64,
) -> Option<f64> {
    if trade == 0.0 {
        return Some(0.0);
    }
    if p_now == 0.0 || p_now.abs() < min_position {
        return None;
    }
    Some(c_spread * f * trade.abs() / (2.0 * p_now * contract_price * delta_t))
}

fn relative_cost(
    p_now: &DVector<f64>,
    p_prev: &DVector<f64>,
    contract_prices: &DVector<f64>,
    params: &MarketParams,
    min_position: f64,
) -> Result<RelativeCost> {
    let d = params.d;
    if p_now.len() != d || p_prev.len() != d || contract_prices.len() != d {
        return Err(Error::shape("positions and prices must have length d"));
    }
    let mut value = DVector::zeros(d);
    let mut cash_only = vec![false; d];
    for i in 0..d {
        match relative_cost_component(
            params.c_spread[i],
            params.f[i],
            p_now[i] - p_prev[i],
            p_now[i],
            contract_prices[i],
            params.delta_t,
            min_position,
        ) {
            Some(c) => value[i] = c,
            None => cash_only[i] = true,
        }
    }
    Ok(RelativeCost { value, cash_only })
}

/// Realised one-way spread relative to the position value, per year:
/// `c f |P_now - P_prev| / (2 P_now C dt)`. Carries the sign of `P_now`.
pub fn cost_term(
    p_now: &DVector<f64>,
    p_prev: &DVector<f64>,
    contract_prices: &DVector<f64>,
    params: &MarketParams,
    min_position: f64,
) -> Result<RelativeCost> {
    relative_cost(p_now, p_prev, contract_prices, params, min_position)
}

/// Tradeable approximation of [`cost_term`] measured against the
/// cost-free optimal position `p_star`.
pub fn approx_cost_term(
    p_star: &DVector<f64>,
    p_prev: &DVector<f64>,
    contract_prices: &DVector<f64>,
    params: &MarketParams,
    min_position: f64,
) -> Result<RelativeCost> {
    relative_cost(p_star, p_prev, contract_prices, params, min_position)
}

/// Cash slippage `1/2 c_i f_i |Delta P_i|` per asset.
pub fn cash_cost(trade: &DVector<f64>, params: &MarketParams) -> DVector<f64> {
    DVector::from_fn(trade.len(), |i, _| {
        0.5 * params.c_spread[i] * params.f[i] * trade[i].abs()
    })
}

/// Net expected payoff after costs.
pub fn payoff_transform(
    beta_hat: &DVector<f64>,
    c_hat: &DVector<f64>,
    mode: PayoffMode,
) -> DVector<f64> {
    DVector::from_fn(beta_hat.len(), |i, _| {
        let (b, c) = (beta_hat[i], c_hat[i]);
        match mode {
            PayoffMode::Literal => (b - c).max(0.0) + (b - c).min(0.0),
            PayoffMode::SoftThreshold => {
                if b == 0.0 {
                    0.0
                } else {
                    b.signum() * (b.abs() - c.abs()).max(0.0)
                }
            }
        }
    })
}

/// Factorised weight matrix for `pi = M^-1 upsilon`.
#[derive(Debug, Clone)]
pub struct WeightMap {
    inverse: DMatrix<f64>,
}

impl WeightMap {
    pub fn new(params: &MarketParams, convention: Convention) -> Result<Self> {
        let m: DMatrix<f64> = match convention {
            Convention::Consistent => &params.sigma * &params.rho * params.sigma.transpose(),
            Convention::Literal => &params.sigma * &params.rho * &params.sigma,
        };
        Ok(Self {
            inverse: Solver::new(m, "sigma rho sigma")?.inverse()?,
        })
    }

    pub fn weights(&self, upsilon: &DVector<f64>) -> Result<DVector<f64>> {
        if upsilon.len() != self.inverse.nrows() {
            return Err(Error::shape("upsilon must have length d"));
        }
        Ok(&self.inverse * upsilon)
    }

    /// Writes the weights into `out` without allocating.
    pub fn weights_into(&self, upsilon: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv(1.0, &self.inverse, upsilon, 0.0);
    }
}

/// Log-optimal weights `(sigma rho sigma')^-1 upsilon`.
pub fn log_optimal_weights(
    upsilon: &DVector<f64>,
    params: &MarketParams,
) -> Result<DVector<f64>> {
    log_optimal_weights_with(upsilon, params, Convention::Consistent)
}

pub fn log_optimal_weights_with(
    upsilon: &DVector<f64>,
    params: &MarketParams,
    convention: Convention,
) -> Result<DVector<f64>> {
    if upsilon.len() != params.d {
        return Err(Error::shape("upsilon must have length d"));
    }
    WeightMap::new(params, convention)?.weights(upsilon)
}

/// Outcome of moving a book to new target weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Rebalance {
    pub positions: DVector<f64>,
    pub trades: DVector<f64>,
    pub clipped: Vec<bool>,
    pub relative_cost: RelativeCost,
    pub cash_cost: DVector<f64>,
}

/// Positions held by one backtest loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionBook {
    pub positions: DVector<f64>,
    pub contract_prices: DVector<f64>,
    pub weights: DVector<f64>,
    pub c_tilde: DVector<f64>,
    pub cap: Option<DVector<f64>>,
}

impl PositionBook {
    pub fn flat(d: usize, cap: Option<DVector<f64>>) -> Self {
        Self {
            positions: DVector::zeros(d),
            contract_prices: DVector::zeros(d),
            weights: DVector::zeros(d),
            c_tilde: DVector::zeros(d),
            cap,
        }
    }

    pub fn rebalance(
        &mut self,
        wealth: f64,
        weights: &DVector<f64>,
        prices: &DVector<f64>,
        params: &MarketParams,
        cfg: &TradingConfig,
    ) -> Result<Rebalance> {
        let contract_prices = contract_price(prices, &params.f)?;
        let target = position_from_weights(wealth, weights, &contract_prices, &params.k, cfg);
        let trades = &target.positions - &self.positions;
        let relative_cost = cost_term(
            &target.positions,
            &self.positions,
            &contract_prices,
            params,
            cfg.min_relative_position,
        )?;
        let cash = cash_cost(&trades, params);
        self.positions = target.positions.clone();
        self.contract_prices = contract_prices;
        self.weights = weights.clone();
        self.c_tilde = relative_cost.value.clone();
        Ok(Rebalance {
            positions: target.positions,
            trades,
            clipped: target.clipped,
            relative_cost,
            cash_cost: cash,
        })
    }
}
