//! Per-path pipeline (simulate, filter, change measure, backtest) and the
//! Monte Carlo reports built on it.
//!
//! Every policy on a path sees the same simulated returns, so differences
//! between policies are estimated on common random numbers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{default_p_cov0, run_filter, FilterHistory};
use crate::market::{simulate_path_with, Convention, MarketParams, PathState, SimOptions};
use crate::measure::{theta_path, zeta_projection, MeasureState, RiskMap, DEFAULT_THETA_MAX};
use crate::montecarlo::{run_paths, McConfig, MeanVar, Merge};
use crate::policy::PolicySpec;
use crate::utility::Utility;
use crate::wealth::{run_backtest, BacktestConfig, WealthLedger};

/// Prior for the drift filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSetup {
    pub beta_hat0: DVector<f64>,
    pub p_cov0: DMatrix<f64>,
}

impl FilterSetup {
    /// Prior mean `beta0` with the default prior covariance.
    pub fn for_params(params: &MarketParams) -> Self {
        Self {
            beta_hat0: params.beta0.clone(),
            p_cov0: default_p_cov0(params),
        }
    }

    /// The drift is known: zero prior covariance at `beta0`.
    pub fn known(params: &MarketParams) -> Self {
        Self {
            beta_hat0: params.beta0.clone(),
            p_cov0: DMatrix::zeros(params.d, params.d),
        }
    }
}

/// Which drift feeds the relative risk process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSource {
    /// Simulated drift and Brownian increments.
    #[default]
    Latent,
    /// Filtered drift and the innovation increments; observable on real data.
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureSetup {
    pub source: ThetaSource,
    pub convention: Convention,
    pub theta_max: f64,
}

impl Default for MeasureSetup {
    fn default() -> Self {
        Self {
            source: ThetaSource::Latent,
            convention: Convention::Consistent,
            theta_max: DEFAULT_THETA_MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub params: MarketParams,
    pub sim: SimOptions,
    pub filter: FilterSetup,
    pub measure: MeasureSetup,
    pub backtest: BacktestConfig,
    pub x0: f64,
}

/// Everything produced on one path.
#[derive(Debug, Clone)]
pub struct PathOutcome {
    pub path: PathState,
    pub filter: Option<FilterHistory>,
    pub measure: MeasureState,
    /// Projection `zeta` built from the filtered drift and `W~`, when the
    /// filter ran alongside a latent measure.
    pub zeta: Option<DVector<f64>>,
    pub ledgers: Vec<WealthLedger>,
}

impl Scenario {
    pub fn new(params: MarketParams) -> Self {
        Self {
            filter: FilterSetup::for_params(&params),
            params,
            sim: SimOptions::default(),
            measure: MeasureSetup::default(),
            backtest: BacktestConfig::default(),
            x0: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let d = self.params.d;
        if self.filter.beta_hat0.len() != d || self.filter.p_cov0.shape() != (d, d) {
            return Err(Error::param("p_cov0", format!("prior must be {d}-dimensional")));
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return Err(Error::param("x0", "initial wealth must be positive"));
        }
        if !(self.measure.theta_max > 0.0) {
            return Err(Error::param("theta_max", "must be positive"));
        }
        self.backtest.trading.validate(d)
    }

    pub fn needs_filter(&self, policies: &[PolicySpec]) -> bool {
        self.measure.source == ThetaSource::Filtered || policies.iter().any(|p| p.uses_filter())
    }

    /// Labels of `policies`, in order.
    pub fn policy_names(&self, policies: &[PolicySpec]) -> Result<Vec<String>> {
        policies
            .iter()
            .map(|p| Ok(p.build(&self.params, 0, 0)?.name()))
            .collect()
    }

    /// Simulate path `path` of run `seed` and push every policy through it.
    pub fn run_path(&self, seed: u64, path: u64, policies: &[PolicySpec]) -> Result<PathOutcome> {
        let state = simulate_path_with(&self.params, &self.sim, seed, path)?;
        self.run_on(state, seed, path, policies)
    }

    /// Pipeline on an existing path. Ingested data has no latent part and
    /// needs [`ThetaSource::Filtered`].
    pub fn run_on(
        &self,
        state: PathState,
        seed: u64,
        path: u64,
        policies: &[PolicySpec],
    ) -> Result<PathOutcome> {
        let p = &self.params;
        let filter = if self.needs_filter(policies) {
            Some(run_filter(&state, p, &self.filter.p_cov0, &self.filter.beta_hat0)?)
        } else {
            None
        };
        let risk = RiskMap::new(p, self.measure.convention)?;
        let n_steps = state.n_steps();
        let (drift, dw) = match self.measure.source {
            ThetaSource::Latent => {
                let latent = state.latent.as_ref().ok_or_else(|| {
                    Error::Domain("latent drift unavailable; use the filtered theta source".into())
                })?;
                (&latent.beta, &latent.dw)
            }
            ThetaSource::Filtered => {
                let h = filter.as_ref().expect("filter runs for the filtered source");
                (&h.beta_hat, &h.innovations)
            }
        };
        let (theta, capped) = theta_path(drift, None, n_steps, &risk, self.measure.theta_max)?;
        let measure = MeasureState::build(theta, dw, p, capped)?;
        let zeta = match (&filter, self.measure.source) {
            (Some(h), ThetaSource::Latent) => {
                let (theta_hat, _) =
                    theta_path(&h.beta_hat, None, n_steps, &risk, self.measure.theta_max)?;
                Some(zeta_projection(&theta_hat, &measure.dw_tilde(), p)?)
            }
            _ => None,
        };

        let mut ledgers = Vec::with_capacity(policies.len());
        for spec in policies {
            let mut policy = spec.build(p, seed, path)?;
            ledgers.push(run_backtest(
                &state,
                filter.as_ref(),
                policy.as_mut(),
                p,
                &self.backtest,
                self.x0,
            )?);
        }
        Ok(PathOutcome {
            path: state,
            filter,
            measure,
            zeta,
            ledgers,
        })
    }
}

/// One Monte Carlo expectation against its theoretical value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleRow {
    pub quantity: String,
    pub n_paths: u64,
    pub mean: f64,
    pub stderr: f64,
    pub target: f64,
    pub z_score: f64,
}

impl MartingaleRow {
    pub fn new(quantity: impl Into<String>, acc: &MeanVar, target: f64) -> Self {
        Self {
            quantity: quantity.into(),
            n_paths: acc.n,
            mean: acc.mean,
            stderr: acc.stderr(),
            target,
            z_score: acc.z_score(target),
        }
    }

    /// `|mean - target| <= k stderr`.
    pub fn within(&self, k: f64) -> bool {
        (self.mean - self.target).abs() <= k * self.stderr
    }

    /// `mean <= target + k stderr`.
    pub fn at_most(&self, k: f64) -> bool {
        self.mean <= self.target + k * self.stderr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub rows: Vec<MartingaleRow>,
    pub capped_steps: u64,
    pub dead_paths: Vec<u64>,
}

impl MartingaleReport {
    pub fn row(&self, quantity: &str) -> Option<&MartingaleRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }
}

#[derive(Debug, Clone, Default)]
struct MartingaleAcc {
    stats: Vec<MeanVar>,
    capped: u64,
    dead: Vec<u64>,
}

impl Merge for MartingaleAcc {
    fn merge(&mut self, other: Self) {
        self.stats.merge(other.stats);
        self.capped += other.capped;
        self.dead.extend(other.dead);
    }
}

/// Number of equal step buckets in the `E[Z_N Delta W~] = 0` rows.
pub const W_TILDE_BUCKETS: usize = 4;

/// `E[Z_N] = 1`; `E[Z_N (W~_b - W~_a)] = 0` per component over
/// [`W_TILDE_BUCKETS`] step buckets; `E[Z_N / zeta_N] = 1` when the filter
/// runs; and, for each policy, `E[H_N X_N] <= x0`.
pub fn martingale_report(
    scenario: &Scenario,
    policies: &[PolicySpec],
    mc: &McConfig,
) -> Result<MartingaleReport> {
    scenario.validate()?;
    let d = scenario.params.d;
    let names = scenario.policy_names(policies)?;
    let n_steps = scenario.params.n_steps;
    let buckets = W_TILDE_BUCKETS.min(n_steps).max(1);
    let bounds: Vec<usize> = (0..=buckets).map(|b| b * n_steps / buckets).collect();
    let with_zeta =
        scenario.measure.source == ThetaSource::Latent && scenario.needs_filter(policies);
    let w_rows = buckets * d;
    let first_policy = 1 + w_rows + usize::from(with_zeta);
    let width = first_policy + policies.len();
    let acc = run_paths(
        mc,
        || MartingaleAcc {
            stats: vec![MeanVar::new(); width],
            ..Default::default()
        },
        |path, acc| {
            let out = scenario.run_path(mc.seed, path, policies)?;
            let m = &out.measure;
            let last = m.n_steps();
            let z = m.z[last];
            acc.stats[0].push(z);
            for b in 0..buckets {
                for i in 0..d {
                    let inc = m.w_tilde[(bounds[b + 1], i)] - m.w_tilde[(bounds[b], i)];
                    acc.stats[1 + b * d + i].push(z * inc);
                }
            }
            if let Some(zeta) = &out.zeta {
                acc.stats[1 + w_rows].push(z / zeta[last]);
            }
            for (k, ledger) in out.ledgers.iter().enumerate() {
                acc.stats[first_policy + k].push(m.h[last] * ledger.terminal());
                if ledger.dead_at.is_some() && !acc.dead.contains(&path) {
                    acc.dead.push(path);
                }
            }
            acc.capped += m.capped_steps as u64;
            Ok(())
        },
    )?;

    let mut rows = vec![MartingaleRow::new("Z_N", &acc.stats[0], 1.0)];
    for b in 0..buckets {
        for i in 0..d {
            rows.push(MartingaleRow::new(
                format!("Z_N*dW~[{}..{}][{}]", bounds[b], bounds[b + 1], i + 1),
                &acc.stats[1 + b * d + i],
                0.0,
            ));
        }
    }
    if with_zeta {
        rows.push(MartingaleRow::new("Z_N/zeta_N", &acc.stats[1 + w_rows], 1.0));
    }
    for (k, name) in names.iter().enumerate() {
        rows.push(MartingaleRow::new(
            format!("H_N*X_N[{name}]"),
            &acc.stats[first_policy + k],
            scenario.x0,
        ));
    }
    let mut dead = acc.dead;
    dead.sort_unstable();
    Ok(MartingaleReport {
        rows,
        capped_steps: acc.capped,
        dead_paths: dead,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub policy: String,
    pub n_paths: u64,
    pub mean_utility: f64,
    pub stderr: f64,
    /// Mean of `U(X_base) - U(X_policy)` on shared paths.
    pub advantage: f64,
    pub advantage_stderr: f64,
    /// `advantage > 2 advantage_stderr`.
    pub base_dominates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub utility: String,
    pub rows: Vec<ProbeRow>,
}

/// Terminal expected utility of `base` against each perturbation on common
/// random numbers. Row 0 is the base policy compared with itself.
pub fn optimality_probe(
    scenario: &Scenario,
    base: &PolicySpec,
    perturbations: &[PolicySpec],
    utility: &dyn Utility,
    mc: &McConfig,
) -> Result<ProbeReport> {
    scenario.validate()?;
    let mut policies = vec![base.clone()];
    policies.extend(perturbations.iter().cloned());
    let names = scenario.policy_names(&policies)?;
    let k = policies.len();
    let acc = run_paths(
        mc,
        || vec![MeanVar::new(); 2 * k],
        |path, acc: &mut Vec<MeanVar>| {
            let state = simulate_path_with(&scenario.params, &scenario.sim, mc.seed, path)?;
            let out = scenario.run_on(state, mc.seed, path, &policies)?;
            let base_u = utility.value(out.ledgers[0].terminal());
            for (j, ledger) in out.ledgers.iter().enumerate() {
                let u = utility.value(ledger.terminal());
                acc[j].push(u);
                acc[k + j].push(base_u - u);
            }
            Ok(())
        },
    )?;
    let rows = names
        .into_iter()
        .enumerate()
        .map(|(j, policy)| {
            let adv = &acc[k + j];
            ProbeRow {
                policy,
                n_paths: acc[j].n,
                mean_utility: acc[j].mean,
                stderr: acc[j].stderr(),
                advantage: adv.mean,
                advantage_stderr: adv.stderr(),
                base_dominates: adv.mean > 2.0 * adv.stderr(),
            }
        })
        .collect();
    Ok(ProbeReport {
        utility: utility.name(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::LogOptimalConfig;
    use crate::utility::LogUtility;

    fn known_drift() -> Scenario {
        let p = MarketParams::single_asset(0.2, 0.08, 50, 0.02);
        let mut s = Scenario::new(p.clone());
        s.filter = FilterSetup::known(&p);
        s
    }

    #[test]
    fn zero_policy_budget_is_exact_without_rates() {
        let s = known_drift();
        let r = martingale_report(&s, &[PolicySpec::Zero], &McConfig::new(600, 3)).unwrap();
        let row = r.row("H_N*X_N[zero]").unwrap();
        // X = x0 on every path, so H X = x0 Z
        let z = r.row("Z_N").unwrap();
        assert!((row.mean - s.x0 * z.mean).abs() < 1e-6 * s.x0);
        assert!(z.within(4.0));
    }

    #[test]
    fn reports_do_not_depend_on_worker_count() {
        let s = known_drift();
        let pol = [PolicySpec::log_optimal(), PolicySpec::RandomBounded { bound: 1.0 }];
        let a = martingale_report(&s, &pol, &McConfig::new(700, 11)).unwrap();
        let b = martingale_report(&s, &pol, &McConfig::new(700, 11).with_workers(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probe_self_comparison_is_zero() {
        let s = known_drift();
        let base = PolicySpec::log_optimal();
        let r = optimality_probe(&s, &base, std::slice::from_ref(&base), &LogUtility, &McConfig::new(300, 2))
            .unwrap();
        assert_eq!(r.rows[1].advantage, 0.0);
        assert!(!r.rows[1].base_dominates);
        let half = PolicySpec::LogOptimal(LogOptimalConfig { scale: 0.5, ..Default::default() });
        assert_eq!(s.policy_names(&[half]).unwrap(), vec!["log_optimal(scale=0.5)"]);
    }

    #[test]
    fn latent_source_needs_simulated_paths() {
        let s = known_drift();
        let prices = DMatrix::from_element(5, 1, 100.0);
        let times = DVector::from_fn(5, |n, _| n as f64 * 0.02);
        let state = PathState::from_prices(times, prices).unwrap();
        assert!(s.run_on(state.clone(), 0, 0, &[]).is_err());
        let mut f = s.clone();
        f.measure.source = ThetaSource::Filtered;
        f.params.n_steps = 4;
        let out = f.run_on(state, 0, 0, &[PolicySpec::log_optimal()]).unwrap();
        assert_eq!(out.measure.n_steps(), 4);
    }
}
