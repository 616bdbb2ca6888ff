//! Scenario files: one TOML document per experiment.

use std::path::{Path, PathBuf};

use futopt_core::filter::default_p_cov0;
use futopt_core::linalg::from_rows;
use futopt_core::policy::PolicySpec;
use futopt_core::rng::IncrementLaw;
use futopt_core::scenario::{FilterSetup, MeasureSetup, Scenario};
use futopt_core::trading::{Rounding, TradingConfig};
use futopt_core::wealth::{BacktestConfig, DEFAULT_VOL_WINDOW};
use futopt_core::{MarketParams, SimOptions};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Backtest,
    VerifyMeasure,
    DualityReport,
    CostSweep,
    OptimalityProbe,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Backtest => "backtest",
            Experiment::VerifyMeasure => "verify-measure",
            Experiment::DualityReport => "duality-report",
            Experiment::CostSweep => "cost-sweep",
            Experiment::OptimalityProbe => "optimality-probe",
        }
    }
}

/// Market block as written in the file; vectors and matrices default to the
/// neutral choice for the dimension implied by `sigma`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub n_steps: usize,
    pub delta_t: f64,
    pub sigma: Vec<Vec<f64>>,
    pub rho: Option<Vec<Vec<f64>>>,
    pub alpha: Option<Vec<Vec<f64>>>,
    pub varsigma: Option<Vec<Vec<f64>>>,
    pub f: Option<Vec<f64>>,
    pub c_spread: Option<Vec<f64>>,
    pub k: Option<Vec<f64>>,
    pub f0: Option<Vec<f64>>,
    pub beta0: Option<Vec<f64>>,
    #[serde(default)]
    pub m: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub increment_law: IncrementLaw,
    pub price_floor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "one")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for McSection {
    fn default() -> Self {
        Self { n_paths: 1, seed: 0, workers: 1 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub beta_hat0: Option<Vec<f64>>,
    pub p_cov0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradingSection {
    pub x0: f64,
    pub caps: Option<Vec<f64>>,
    pub rounding: Rounding,
    pub min_relative_position: f64,
    /// Realised-volatility window in steps.
    pub vol_window: usize,
}

impl Default for TradingSection {
    fn default() -> Self {
        Self {
            x0: 1e6,
            caps: None,
            rounding: Rounding::Fractional,
            min_relative_position: 1.0,
            vol_window: DEFAULT_VOL_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub json: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), json: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub delta_t: Vec<f64>,
    pub position_now: Vec<f64>,
    pub position_prev: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            delta_t: vec![1.0 / 52.0, 1.0 / 252.0, 1.0 / 2520.0],
            position_now: Vec::new(),
            position_prev: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilitySpec {
    Log,
    Power { delta: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub utility: UtilitySpec,
    pub scales: Vec<f64>,
    pub lag: usize,
    pub zero_each_component: bool,
    pub power_deltas: Vec<f64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            utility: UtilitySpec::Log,
            scales: vec![0.5, 1.5],
            lag: 5,
            zero_each_component: true,
            power_deltas: vec![0.5],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV with `time, price_1..price_d`.
    pub prices_csv: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub experiment: Option<Experiment>,
    pub market: MarketSection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default = "PolicySpec::log_optimal")]
    pub strategy: PolicySpec,
    #[serde(default)]
    pub trading: TradingSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub measure: MeasureSetup,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub probe: ProbeSection,
    pub data: Option<DataSection>,
}

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub experiment: Option<Experiment>,
    pub scenario: Scenario,
    pub mc: McSection,
    pub strategy: PolicySpec,
    pub outputs: OutputSection,
    pub sweep: SweepSection,
    pub probe: ProbeSection,
    pub data: Option<PathBuf>,
    /// The file bytes, hashed into the manifest.
    pub source: String,
}

fn vector(v: &Option<Vec<f64>>, d: usize, fill: f64) -> DVector<f64> {
    match v {
        Some(v) => DVector::from_column_slice(v),
        None => DVector::from_element(d, fill),
    }
}

fn matrix(m: &Option<Vec<Vec<f64>>>, name: &str, default: DMatrix<f64>) -> Result<DMatrix<f64>, CliError> {
    match m {
        Some(rows) => Ok(from_rows(rows, name)?),
        None => Ok(default),
    }
}

impl MarketSection {
    pub fn to_params(&self) -> Result<MarketParams, CliError> {
        let d = self.sigma.len();
        if d == 0 {
            return Err(CliError::invalid("market.sigma", "must have at least one row"));
        }
        let sigma = from_rows(&self.sigma, "sigma")?;
        let params = MarketParams {
            d,
            n_steps: self.n_steps,
            delta_t: self.delta_t,
            sigma,
            rho: matrix(&self.rho, "rho", DMatrix::identity(d, d))?,
            alpha: matrix(&self.alpha, "alpha", DMatrix::zeros(d, d))?,
            varsigma: matrix(&self.varsigma, "varsigma", DMatrix::zeros(d, d))?,
            f: vector(&self.f, d, 1.0),
            c_spread: vector(&self.c_spread, d, 0.0),
            m: self.m,
            r: self.r,
            k: vector(&self.k, d, 1.0),
            f0: vector(&self.f0, d, 100.0),
            beta0: vector(&self.beta0, d, 0.0),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Parse and validate a scenario from TOML text.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, CliError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    let params = raw.market.to_params()?;
    let d = params.d;

    let mut scenario = Scenario::new(params.clone());
    scenario.sim = SimOptions {
        increment_law: raw.market.increment_law,
        price_floor: raw.market.price_floor.unwrap_or(SimOptions::default().price_floor),
        ..SimOptions::default()
    };
    scenario.filter = FilterSetup {
        beta_hat0: raw
            .filter
            .beta_hat0
            .as_ref()
            .map(|v| DVector::from_column_slice(v))
            .unwrap_or_else(|| params.beta0.clone()),
        p_cov0: match &raw.filter.p_cov0 {
            Some(rows) => from_rows(rows, "p_cov0")?,
            None => default_p_cov0(&params),
        },
    };
    scenario.measure = raw.measure;
    scenario.backtest = BacktestConfig {
        trading: TradingConfig {
            caps: raw.trading.caps.as_ref().map(|c| DVector::from_column_slice(c)),
            rounding: raw.trading.rounding,
            min_relative_position: raw.trading.min_relative_position,
        },
        vol_window: raw.trading.vol_window,
    };
    scenario.x0 = raw.trading.x0;
    scenario.validate()?;
    let p0 = &scenario.filter.p_cov0;
    if (p0 - p0.transpose()).abs().max() > 1e-12 || futopt_core::linalg::min_eigenvalue(p0) < -1e-12 {
        return Err(CliError::invalid("filter.p_cov0", "must be symmetric positive semidefinite"));
    }
    if raw.mc.n_paths < 1 {
        return Err(CliError::invalid("mc.n_paths", "must be at least 1"));
    }
    raw.strategy.build(&params, 0, 0)?;
    if raw.sweep.delta_t.iter().any(|&t| !(t > 0.0)) {
        return Err(CliError::invalid("sweep.delta_t", "steps must be positive"));
    }
    for (name, v) in [("sweep.position_now", &raw.sweep.position_now), ("sweep.position_prev", &raw.sweep.position_prev)] {
        if !v.is_empty() && v.len() != d {
            return Err(CliError::invalid(name, format!("must have length {d}")));
        }
    }
    if let UtilitySpec::Power { delta } = raw.probe.utility {
        futopt_core::utility::PowerUtility::new(delta)?;
    }
    for &delta in &raw.probe.power_deltas {
        futopt_core::utility::PowerUtility::new(delta)?;
    }

    Ok(ScenarioConfig {
        experiment: raw.experiment,
        scenario,
        mc: raw.mc,
        strategy: raw.strategy,
        outputs: raw.outputs,
        sweep: raw.sweep,
        probe: raw.probe,
        data: raw.data.map(|d| d.prices_csv),
        source: text.to_string(),
    })
}

/// Read, parse and validate a scenario file. A relative `data.prices_csv`
/// is resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        CliError::Parse(msg) => CliError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if let Some(data) = &cfg.data {
        if data.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data = Some(dir.join(data));
            }
        }
    }
    Ok(cfg)
}

impl ScenarioConfig {
    pub fn params(&self) -> &MarketParams {
        &self.scenario.params
    }

    pub fn theta_max(&self) -> f64 {
        self.scenario.measure.theta_max
    }
}
