//! Causal weight policies.
//!
//! A policy sees an [`Observation`] built from prices, returns and the filter
//! output. The latent drift and Brownian paths are not part of that type, so
//! a policy cannot peek at them.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Convention, MarketParams};
use crate::rng::{stream_rng, Stream};
use crate::trading::{relative_cost_component, PayoffMode, WeightMap};

/// Everything a policy may use at grid time `t_n`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub step: usize,
    pub time: f64,
    pub prices: &'a DVector<f64>,
    pub contract_prices: &'a DVector<f64>,
    /// `E[beta_{t_n} | F^R_{t_n}]` when a filter runs alongside.
    pub beta_hat: Option<&'a DVector<f64>>,
    pub p_cov: Option<&'a DMatrix<f64>>,
    pub wealth: f64,
    /// Positions held coming into `t_n`.
    pub positions: &'a DVector<f64>,
}

pub trait Policy: Send {
    fn name(&self) -> String;

    fn uses_filter(&self) -> bool {
        false
    }

    /// Writes the portfolio weights for `obs.step` into `out`.
    fn weights(&mut self, obs: &Observation<'_>, out: &mut DVector<f64>) -> Result<()>;
}

#[derive(Debug, Clone, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn name(&self) -> String {
        "zero".into()
    }

    fn weights(&mut self, _: &Observation<'_>, out: &mut DVector<f64>) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    pub weights: DVector<f64>,
}

impl Policy for ConstantPolicy {
    fn name(&self) -> String {
        "constant".into()
    }

    fn weights(&mut self, _: &Observation<'_>, out: &mut DVector<f64>) -> Result<()> {
        out.copy_from(&self.weights);
        Ok(())
    }
}

/// Independent uniform weights on `[-bound, bound]` drawn from the policy
/// stream of one path.
#[derive(Debug, Clone)]
pub struct RandomBoundedPolicy {
    bound: f64,
    rng: ChaCha8Rng,
}

impl RandomBoundedPolicy {
    pub fn new(bound: f64, seed: u64, path: u64) -> Self {
        Self {
            bound,
            rng: stream_rng(seed, path, Stream::Policy),
        }
    }
}

impl Policy for RandomBoundedPolicy {
    fn name(&self) -> String {
        "random_bounded".into()
    }

    fn weights(&mut self, _: &Observation<'_>, out: &mut DVector<f64>) -> Result<()> {
        for w in out.iter_mut() {
            *w = self.rng.random_range(-self.bound..=self.bound);
        }
        Ok(())
    }
}

/// Replays a fixed `N x d` weight matrix.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    pub weights: DMatrix<f64>,
}

impl Policy for ReplayPolicy {
    fn name(&self) -> String {
        "replay".into()
    }

    fn weights(&mut self, obs: &Observation<'_>, out: &mut DVector<f64>) -> Result<()> {
        if obs.step >= self.weights.nrows() {
            return Err(Error::shape(format!(
                "replay has {} rows, step {} requested",
                self.weights.nrows(),
                obs.step
            )));
        }
        for (i, w) in out.iter_mut().enumerate() {
            *w = self.weights[(obs.step, i)];
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogOptimalConfig {
    pub mode: PayoffMode,
    pub convention: Convention,
    /// Net the drift by the approximate cost of reaching the cost-free target.
    pub cost_aware: bool,
    /// Multiplies the final weights.
    pub scale: f64,
    /// Use the estimate from `lag` steps earlier.
    pub lag: usize,
    /// Components forced to zero weight.
    pub zeroed: Vec<usize>,
    pub min_relative_position: f64,
}

impl Default for LogOptimalConfig {
    fn default() -> Self {
        Self {
            mode: PayoffMode::SoftThreshold,
            convention: Convention::Consistent,
            cost_aware: true,
            scale: 1.0,
            lag: 0,
            zeroed: Vec::new(),
            min_relative_position: 1.0,
        }
    }
}

/// Log-utility optimum on the filtered drift:
/// `pi = (sigma rho sigma')^-1 Upsilon(beta_hat, c_hat)`.
#[derive(Debug, Clone)]
pub struct LogOptimalPolicy {
    cfg: LogOptimalConfig,
    map: WeightMap,
    c_spread: DVector<f64>,
    f: DVector<f64>,
    k: DVector<f64>,
    delta_t: f64,
    history: VecDeque<DVector<f64>>,
    pi0: DVector<f64>,
    upsilon: DVector<f64>,
}

impl LogOptimalPolicy {
    pub fn new(params: &MarketParams, cfg: LogOptimalConfig) -> Result<Self> {
        if let Some(&i) = cfg.zeroed.iter().find(|&&i| i >= params.d) {
            return Err(Error::param("zeroed", format!("component {i} out of range")));
        }
        if !cfg.scale.is_finite() {
            return Err(Error::param("scale", "must be finite"));
        }
        let d = params.d;
        Ok(Self {
            map: WeightMap::new(params, cfg.convention)?,
            c_spread: params.c_spread.clone(),
            f: params.f.clone(),
            k: params.k.clone(),
            delta_t: params.delta_t,
            history: VecDeque::with_capacity(cfg.lag + 1),
            pi0: DVector::zeros(d),
            upsilon: DVector::zeros(d),
            cfg,
        })
    }
}

impl Policy for LogOptimalPolicy {
    fn name(&self) -> String {
        let mut s = format!("log_optimal(scale={}", self.cfg.scale);
        if self.cfg.lag > 0 {
            s.push_str(&format!(",lag={}", self.cfg.lag));
        }
        if !self.cfg.zeroed.is_empty() {
            s.push_str(&format!(",zeroed={:?}", self.cfg.zeroed));
        }
        if !self.cfg.cost_aware {
            s.push_str(",cost_blind");
        }
        s.push(')');
        s
    }

    fn uses_filter(&self) -> bool {
        true
    }

    fn weights(&mut self, obs: &Observation<'_>, out: &mut DVector<f64>) -> Result<()> {
        let beta_hat = obs
            .beta_hat
            .ok_or_else(|| Error::Domain("log-optimal policy needs the drift filter".into()))?;
        if self.history.len() == self.cfg.lag + 1 {
            self.history.pop_front();
        }
        self.history.push_back(beta_hat.clone());
        let b = &self.history[0];

        self.map.weights_into(b, &mut self.pi0);
        self.upsilon.copy_from(b);
        if self.cfg.cost_aware && self.c_spread.iter().any(|&c| c > 0.0) {
            for i in 0..b.len() {
                let target = obs.wealth * self.k[i] * self.pi0[i] / obs.contract_prices[i];
                let c_hat = relative_cost_component(
                    self.c_spread[i],
                    self.f[i],
                    target - obs.positions[i],
                    target,
                    obs.contract_prices[i],
                    self.delta_t,
                    self.cfg.min_relative_position,
                );
                self.upsilon[i] = match c_hat {
                    None => 0.0,
                    Some(c) => match self.cfg.mode {
                        PayoffMode::Literal => (b[i] - c).max(0.0) + (b[i] - c).min(0.0),
                        PayoffMode::SoftThreshold if b[i] == 0.0 => 0.0,
                        PayoffMode::SoftThreshold => {
                            b[i].signum() * (b[i].abs() - c.abs()).max(0.0)
                        }
                    },
                };
            }
        }
        self.map.weights_into(&self.upsilon, out);
        *out *= self.cfg.scale;
        for &i in &self.cfg.zeroed {
            out[i] = 0.0;
        }
        Ok(())
    }
}

/// Serializable policy description; instantiate once per path with
/// [`PolicySpec::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Zero,
    Constant {
        weights: Vec<f64>,
    },
    LogOptimal(LogOptimalConfig),
    RandomBounded {
        bound: f64,
    },
    Replay {
        weights: Vec<Vec<f64>>,
    },
}

impl PolicySpec {
    pub fn log_optimal() -> Self {
        PolicySpec::LogOptimal(LogOptimalConfig::default())
    }

    pub fn uses_filter(&self) -> bool {
        matches!(self, PolicySpec::LogOptimal(_))
    }

    pub fn build(&self, params: &MarketParams, seed: u64, path: u64) -> Result<Box<dyn Policy>> {
        let d = params.d;
        Ok(match self {
            PolicySpec::Zero => Box::new(ZeroPolicy),
            PolicySpec::Constant { weights } => {
                if weights.len() != d {
                    return Err(Error::param("weights", format!("must have length {d}")));
                }
                Box::new(ConstantPolicy {
                    weights: DVector::from_column_slice(weights),
                })
            }
            PolicySpec::LogOptimal(config) => {
                Box::new(LogOptimalPolicy::new(params, config.clone())?)
            }
            PolicySpec::RandomBounded { bound } => {
                if !(bound.is_finite() && *bound >= 0.0) {
                    return Err(Error::param("bound", "must be finite and non-negative"));
                }
                Box::new(RandomBoundedPolicy::new(*bound, seed, path))
            }
            PolicySpec::Replay { weights } => {
                if weights.iter().any(|r| r.len() != d) {
                    return Err(Error::param("weights", format!("every row must have length {d}")));
                }
                let flat: Vec<f64> = weights.iter().flatten().copied().collect();
                Box::new(ReplayPolicy {
                    weights: DMatrix::from_row_slice(weights.len(), d, &flat),
                })
            }
        })
    }
}
