//! Experiment dispatch and artifact emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use futopt_core::filter::{neutrality_diagnostics, MIN_DIAGNOSTIC_STEPS};
use futopt_core::io::{
    write_diagnostics, write_martingale_report, write_path_csv, write_position_ledger, write_probe,
    write_rows, write_wealth_ledger,
};
use futopt_core::market::simulate_path_with;
use futopt_core::montecarlo::{run_paths, McConfig, MeanVar, Merge, Samples};
use futopt_core::policy::{LogOptimalConfig, PolicySpec};
use futopt_core::scenario::{martingale_report, optimality_probe, MartingaleRow, Scenario, ThetaSource};
use futopt_core::trading::{contract_price, cost_term, payoff_transform, PayoffMode};
use futopt_core::utility::{
    big_x, log_optimal_closed_forms, optimal_terminal_wealth, validate_utility, LogUtility,
    PowerUtility, Utility, ValidationReport,
};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Experiment, ScenarioConfig, UtilitySpec};
use crate::error::CliError;
use crate::ingest::ingest_prices;

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub workers: Option<usize>,
}

/// A hard invariant that did not hold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub check: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub experiment: &'static str,
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub failures: Vec<Failure>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> futopt_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

struct Run<'a> {
    cfg: &'a ScenarioConfig,
    scenario: Scenario,
    mc: McConfig,
    json: bool,
    out: Artifacts,
    failures: Vec<Failure>,
}

impl Run<'_> {
    fn fail(&mut self, check: impl Into<String>, detail: impl Into<String>) {
        self.failures.push(Failure { check: check.into(), detail: detail.into() });
    }

    fn summary_json(&mut self, value: serde_json::Value) -> Result<(), CliError> {
        if self.json {
            self.out.json("summary.json", &value)?;
        }
        Ok(())
    }
}

/// Run `experiment` and write its artifacts, a `summary.json` (unless JSON
/// output is off) and a `manifest.json` into the output directory.
pub fn run_experiment(
    cfg: &ScenarioConfig,
    experiment: Experiment,
    opts: &RunOptions,
) -> Result<RunSummary, CliError> {
    let n_paths = opts.paths.unwrap_or(cfg.mc.n_paths);
    if n_paths == 0 {
        return Err(CliError::invalid("paths", "must be at least 1"));
    }
    let seed = opts.seed.unwrap_or(cfg.mc.seed);
    let workers = opts.workers.unwrap_or(cfg.mc.workers).max(1);
    let dir = opts.out.clone().unwrap_or_else(|| cfg.outputs.dir.clone());
    let mut run = Run {
        cfg,
        scenario: cfg.scenario.clone(),
        mc: McConfig::new(n_paths, seed).with_workers(workers),
        json: cfg.outputs.json,
        out: Artifacts::new(&dir)?,
        failures: Vec::new(),
    };
    match experiment {
        Experiment::Simulate => simulate(&mut run)?,
        Experiment::Backtest => backtest(&mut run)?,
        Experiment::VerifyMeasure => verify_measure(&mut run)?,
        Experiment::DualityReport => duality_report(&mut run)?,
        Experiment::CostSweep => cost_sweep(&mut run)?,
        Experiment::OptimalityProbe => probe(&mut run)?,
    }

    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "tool": "futopt",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": experiment.as_str(),
        "seed": seed,
        "n_paths": n_paths,
        "workers": workers,
        "config_sha256": hex::encode(Sha256::digest(cfg.source.as_bytes())),
        "created_unix": created,
        "failures": run.failures,
        "artifacts": run.out.files.iter()
            .map(|(f, h)| json!({"file": f, "sha256": h}))
            .collect::<Vec<_>>(),
    });
    let artifacts = run.out.files.iter().map(|(f, _)| f.clone()).collect();
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(RunSummary {
        experiment: experiment.as_str(),
        out_dir: dir,
        artifacts,
        failures: run.failures,
    })
}

fn simulate(run: &mut Run<'_>) -> Result<(), CliError> {
    let p = &run.scenario.params;
    let mut floors = Vec::new();
    for k in 0..run.mc.n_paths as u64 {
        let path = simulate_path_with(p, &run.scenario.sim, run.mc.seed, k)?;
        let name = if run.mc.n_paths == 1 {
            "path.csv".to_string()
        } else {
            format!("path_{k:05}.csv")
        };
        run.out.csv(&name, |w| write_path_csv(w, &path))?;
        if let Some(w) = &path.diagnostics.warning {
            floors.push(json!({"path": k, "warning": w}));
        }
    }
    run.summary_json(json!({
        "experiment": "simulate",
        "n_paths": run.mc.n_paths,
        "floor_warnings": floors,
    }))
}

#[derive(Debug, Clone)]
struct BacktestAcc {
    terminal: MeanVar,
    log_terminal: MeanVar,
    h_wealth: MeanVar,
    dead: u64,
    clips: u64,
    form_gap: f64,
}

impl Merge for BacktestAcc {
    fn merge(&mut self, o: Self) {
        self.terminal.merge(o.terminal);
        self.log_terminal.merge(o.log_terminal);
        self.h_wealth.merge(o.h_wealth);
        self.dead += o.dead;
        self.clips += o.clips;
        self.form_gap = self.form_gap.max(o.form_gap);
    }
}

const FORM_GAP_TOLERANCE: f64 = 1e-10;

fn backtest(run: &mut Run<'_>) -> Result<(), CliError> {
    let strategy = [run.cfg.strategy.clone()];
    if let Some(data) = run.cfg.data.clone() {
        return backtest_data(run, &data);
    }
    let seed = run.mc.seed;
    let first = run.scenario.run_path(seed, 0, &strategy)?;
    write_single(run, &first)?;

    let scenario = &run.scenario;
    let acc = run_paths(
        &run.mc,
        || BacktestAcc {
            terminal: MeanVar::new(),
            log_terminal: MeanVar::new(),
            h_wealth: MeanVar::new(),
            dead: 0,
            clips: 0,
            form_gap: 0.0,
        },
        |k, acc| {
            let out = scenario.run_path(seed, k, &strategy)?;
            let l = &out.ledgers[0];
            let x = l.terminal();
            acc.terminal.push(x);
            acc.log_terminal.push(x.ln());
            acc.h_wealth.push(out.measure.h[l.n_steps()] * x);
            acc.dead += u64::from(l.dead_at.is_some());
            acc.clips += l.clip_count() as u64;
            acc.form_gap = acc.form_gap.max(l.form_gap);
            Ok(())
        },
    )?;
    if acc.form_gap > FORM_GAP_TOLERANCE {
        let detail = format!("relative and cash wealth differ by {:e}", acc.form_gap);
        run.fail("wealth_forms", detail);
    }
    let budget = MartingaleRow::new("H_N*X_N", &acc.h_wealth, run.scenario.x0);
    run.summary_json(json!({
        "experiment": "backtest",
        "policy": first.ledgers[0].policy,
        "n_paths": run.mc.n_paths,
        "terminal_wealth": {"mean": acc.terminal.mean, "stderr": acc.terminal.stderr(), "std_dev": acc.terminal.std_dev()},
        "log_terminal_wealth": {"mean": acc.log_terminal.mean, "stderr": acc.log_terminal.stderr()},
        "admissibility_violations": acc.dead,
        "clip_events": acc.clips,
        "max_wealth_form_gap": acc.form_gap,
        "budget_constraint": budget,
    }))
}

fn write_single(run: &mut Run<'_>, out: &futopt_core::scenario::PathOutcome) -> Result<(), CliError> {
    let ledger = &out.ledgers[0];
    run.out.csv("path.csv", |w| write_path_csv(w, &out.path))?;
    run.out.csv("positions.csv", |w| write_position_ledger(w, ledger, &out.path))?;
    run.out.csv("wealth.csv", |w| write_wealth_ledger(w, ledger, Some(&out.measure)))?;
    if let Some(h) = &out.filter {
        if h.n_steps() >= MIN_DIAGNOSTIC_STEPS {
            let report = neutrality_diagnostics(&h.innovations, &out.path, &run.scenario.params)?;
            run.out.csv("diagnostics.csv", |w| write_diagnostics(w, &report.rows()))?;
        }
    }
    Ok(())
}

fn backtest_data(run: &mut Run<'_>, data: &Path) -> Result<(), CliError> {
    let d = run.scenario.params.d;
    let (state, spacing) = ingest_prices(data, d)?;
    // the model step comes from the config; the file only fixes the length
    run.scenario.params.n_steps = state.n_steps();
    let switched = run.scenario.measure.source != ThetaSource::Filtered;
    run.scenario.measure.source = ThetaSource::Filtered;
    let out = run.scenario.run_on(state, run.mc.seed, 0, std::slice::from_ref(&run.cfg.strategy))?;
    write_single(run, &out)?;
    let l = &out.ledgers[0];
    if l.form_gap > FORM_GAP_TOLERANCE {
        run.fail("wealth_forms", format!("relative and cash wealth differ by {:e}", l.form_gap));
    }
    run.summary_json(json!({
        "experiment": "backtest",
        "data": data.display().to_string(),
        "data_time_step": spacing,
        "model_delta_t": run.scenario.params.delta_t,
        "theta_source": "filtered",
        "theta_source_switched": switched,
        "policy": l.policy,
        "terminal_wealth": l.terminal(),
        "admissibility_violations": u64::from(l.dead_at.is_some()),
        "clip_events": l.clip_count(),
        "max_wealth_form_gap": l.form_gap,
    }))
}

fn verify_measure(run: &mut Run<'_>) -> Result<(), CliError> {
    let report = martingale_report(&run.scenario, std::slice::from_ref(&run.cfg.strategy), &run.mc)?;
    run.out.csv("martingale.csv", |w| write_martingale_report(w, &report.rows))?;
    let failing: Vec<(String, String)> = report
        .rows
        .iter()
        .filter_map(|r| {
            let ok = if r.quantity.starts_with("H_N*X_N") { r.at_most(3.0) } else { r.within(3.0) };
            (!ok).then(|| (r.quantity.clone(), format!("mean {} target {} z {:.3}", r.mean, r.target, r.z_score)))
        })
        .collect();
    for (q, detail) in failing {
        run.fail(q, detail);
    }
    run.summary_json(json!({
        "experiment": "verify-measure",
        "n_paths": run.mc.n_paths,
        "theta_max": run.scenario.measure.theta_max,
        "capped_steps": report.capped_steps,
        "dead_paths": report.dead_paths.len(),
        "rows": report.rows,
    }))
}

fn utilities(cfg: &ScenarioConfig) -> Result<Vec<Box<dyn Utility>>, CliError> {
    let mut out: Vec<Box<dyn Utility>> = vec![Box::new(LogUtility)];
    for &delta in &cfg.probe.power_deltas {
        out.push(Box::new(PowerUtility::new(delta)?));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct DualAcc {
    h: Samples,
    log_xi: MeanVar,
    log_x: MeanVar,
    value_half: MeanVar,
    value_printed: MeanVar,
    gap_half: MeanVar,
    gap_printed: MeanVar,
}

impl Merge for DualAcc {
    fn merge(&mut self, o: Self) {
        self.h.merge(o.h);
        self.log_xi.merge(o.log_xi);
        self.log_x.merge(o.log_x);
        self.value_half.merge(o.value_half);
        self.value_printed.merge(o.value_printed);
        self.gap_half.merge(o.gap_half);
        self.gap_printed.merge(o.gap_printed);
    }
}

fn stat(m: &MeanVar) -> serde_json::Value {
    json!({"mean": m.mean, "stderr": m.stderr()})
}

fn duality_report(run: &mut Run<'_>) -> Result<(), CliError> {
    let utils = utilities(run.cfg)?;
    let reports: Vec<ValidationReport> = utils.iter().map(|u| validate_utility(u.as_ref())).collect();
    for r in &reports {
        for c in r.checks.iter().filter(|c| !c.passed) {
            run.fail(format!("{}:{}", r.utility, c.name), format!("worst {} tolerance {}", c.worst, c.tolerance));
        }
    }

    let scenario = &run.scenario;
    let strategy = [run.cfg.strategy.clone()];
    let seed = run.mc.seed;
    let x0 = scenario.x0;
    let acc = run_paths(
        &run.mc,
        || DualAcc {
            h: Samples::default(),
            log_xi: MeanVar::new(),
            log_x: MeanVar::new(),
            value_half: MeanVar::new(),
            value_printed: MeanVar::new(),
            gap_half: MeanVar::new(),
            gap_printed: MeanVar::new(),
        },
        |k, acc| {
            let out = scenario.run_path(seed, k, &strategy)?;
            let m = &out.measure;
            acc.h.0.push(m.h[m.n_steps()]);
            let cf = log_optimal_closed_forms(m, &scenario.params, x0)?;
            let log_x = out.ledgers[0].terminal().ln();
            acc.log_xi.push(cf.xi.ln());
            acc.log_x.push(log_x);
            acc.value_half.push(cf.value_half);
            acc.value_printed.push(cf.value_printed);
            acc.gap_half.push(log_x - cf.value_half);
            acc.gap_printed.push(log_x - cf.value_printed);
            Ok(())
        },
    )?;

    let mut budget = Vec::new();
    for u in &utils {
        let (y, xi) = optimal_terminal_wealth(x0, &acc.h.0, u.as_ref())?;
        let hx = MeanVar::from_slice(&acc.h.0.iter().zip(&xi).map(|(h, x)| h * x).collect::<Vec<_>>());
        let (big, big_se) = big_x(y, &acc.h.0, u.as_ref())?;
        budget.push(json!({
            "utility": u.name(),
            "multiplier": y,
            "big_x": big,
            "big_x_stderr": big_se,
            "mean_h_xi": hx.mean,
            "stderr_h_xi": hx.stderr(),
            "target": x0,
        }));
    }

    let report = json!({
        "experiment": "duality-report",
        "utilities": reports,
        "terminal_wealth_budget": budget,
        "log_value_function": {
            "n_paths": run.mc.n_paths,
            "policy": strategy[0].build(&scenario.params, 0, 0)?.name(),
            "mc_log_terminal_wealth": stat(&acc.log_x),
            "mc_log_xi": stat(&acc.log_xi),
            "formula_with_half": stat(&acc.value_half),
            "formula_printed": stat(&acc.value_printed),
            "log_wealth_minus_half_formula": stat(&acc.gap_half),
            "log_wealth_minus_printed_formula": stat(&acc.gap_printed),
        },
    });
    run.out.json("duality.json", &report)?;
    let failed = run.failures.len();
    run.summary_json(json!({"experiment": "duality-report", "failed_checks": failed}))
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    delta_t: f64,
    asset: usize,
    position_now: f64,
    position_prev: f64,
    contract_price: f64,
    c_tilde: f64,
    c_tilde_times_dt: f64,
    upsilon_soft_threshold: f64,
    upsilon_literal: f64,
}

#[derive(Debug, Clone, Serialize)]
struct SweepBacktestRow {
    delta_t: f64,
    n_steps: usize,
    n_paths: u64,
    mean_terminal_wealth: f64,
    stderr_terminal_wealth: f64,
    mean_total_cash_cost: f64,
}

fn cost_sweep(run: &mut Run<'_>) -> Result<(), CliError> {
    let base = run.scenario.params.clone();
    let d = base.d;
    let sweep = &run.cfg.sweep;
    let now = if sweep.position_now.is_empty() { DVector::from_element(d, 10.0) } else { DVector::from_column_slice(&sweep.position_now) };
    let prev = if sweep.position_prev.is_empty() { DVector::from_element(d, 8.0) } else { DVector::from_column_slice(&sweep.position_prev) };
    let cprice = contract_price(&base.f0, &base.f)?;

    let mut rows = Vec::new();
    let mut scaled: Vec<DVector<f64>> = Vec::new();
    for &dt in &sweep.delta_t {
        let mut p = base.clone();
        p.delta_t = dt;
        let c = cost_term(&now, &prev, &cprice, &p, 0.0)?.value;
        let soft = payoff_transform(&base.beta0, &c, PayoffMode::SoftThreshold);
        let lit = payoff_transform(&base.beta0, &c, PayoffMode::Literal);
        for i in 0..d {
            rows.push(SweepRow {
                delta_t: dt,
                asset: i + 1,
                position_now: now[i],
                position_prev: prev[i],
                contract_price: cprice[i],
                c_tilde: c[i],
                c_tilde_times_dt: c[i] * dt,
                upsilon_soft_threshold: soft[i],
                upsilon_literal: lit[i],
            });
        }
        scaled.push(c * dt);

        let mut half = base.clone();
        half.delta_t = dt / 2.0;
        let c_half = cost_term(&now, &prev, &cprice, &half, 0.0)?.value;
        let c_full = cost_term(&now, &prev, &cprice, &p, 0.0)?.value;
        if c_half != &c_full * 2.0 {
            run.fail("cost_halving", format!("halving dt={dt} did not double the cost exactly"));
        }
    }
    // c~ dt is constant across the sweep up to the rounding of one product
    if let Some(first) = scaled.first() {
        for (k, s) in scaled.iter().enumerate().skip(1) {
            for i in 0..d {
                let rel = (s[i] - first[i]).abs() / first[i].abs().max(f64::MIN_POSITIVE);
                if first[i] != 0.0 && rel > 4.0 * f64::EPSILON {
                    run.fail("cost_scaling", format!("row {k} asset {}: c~ dt off by {rel:e}", i + 1));
                }
            }
        }
    }
    run.out.csv("cost_sweep.csv", |w| write_rows(w, &rows))?;

    // same horizon, finer grids: slippage grows as trades get more frequent
    let horizon = base.horizon();
    let mut bt_rows = Vec::new();
    for &dt in &sweep.delta_t {
        let mut s = run.scenario.clone();
        s.params.delta_t = dt;
        s.params.n_steps = ((horizon / dt).round() as usize).max(1);
        let strategy = [run.cfg.strategy.clone()];
        let seed = run.mc.seed;
        let acc = run_paths(
            &run.mc,
            || vec![MeanVar::new(); 2],
            |k, acc: &mut Vec<MeanVar>| {
                let out = s.run_path(seed, k, &strategy)?;
                let l = &out.ledgers[0];
                acc[0].push(l.terminal());
                acc[1].push(l.cash_cost_hist.sum());
                Ok(())
            },
        )?;
        bt_rows.push(SweepBacktestRow {
            delta_t: dt,
            n_steps: s.params.n_steps,
            n_paths: acc[0].n,
            mean_terminal_wealth: acc[0].mean,
            stderr_terminal_wealth: acc[0].stderr(),
            mean_total_cash_cost: acc[1].mean,
        });
    }
    run.out.csv("cost_sweep_backtest.csv", |w| write_rows(w, &bt_rows))?;
    let n_rows = rows.len();
    run.summary_json(json!({
        "experiment": "cost-sweep",
        "delta_t": sweep.delta_t,
        "rows": n_rows,
        "exact_scaling": run.failures.is_empty(),
    }))
}

fn probe(run: &mut Run<'_>) -> Result<(), CliError> {
    let base_cfg = match &run.cfg.strategy {
        PolicySpec::LogOptimal(c) => c.clone(),
        _ => return Err(CliError::invalid("strategy.kind", "optimality-probe needs a log_optimal base strategy")),
    };
    let probe_cfg = &run.cfg.probe;
    let variant = |f: &dyn Fn(&mut LogOptimalConfig)| {
        let mut c = base_cfg.clone();
        f(&mut c);
        PolicySpec::LogOptimal(c)
    };
    let mut perturbations = Vec::new();
    for &s in &probe_cfg.scales {
        perturbations.push(variant(&|c| c.scale *= s));
    }
    if probe_cfg.lag > 0 {
        perturbations.push(variant(&|c| c.lag += probe_cfg.lag));
    }
    if probe_cfg.zero_each_component {
        for i in 0..run.scenario.params.d {
            perturbations.push(variant(&|c| {
                if !c.zeroed.contains(&i) {
                    c.zeroed.push(i)
                }
            }));
        }
    }
    if base_cfg.cost_aware && run.scenario.params.c_spread.iter().any(|&c| c > 0.0) {
        perturbations.push(variant(&|c| c.cost_aware = false));
    }
    let utility: Box<dyn Utility> = match probe_cfg.utility {
        UtilitySpec::Log => Box::new(LogUtility),
        UtilitySpec::Power { delta } => Box::new(PowerUtility::new(delta)?),
    };
    let report = optimality_probe(&run.scenario, &run.cfg.strategy, &perturbations, utility.as_ref(), &run.mc)?;
    run.out.csv("probe.csv", |w| write_probe(w, &report.rows))?;
    run.summary_json(json!({
        "experiment": "optimality-probe",
        "n_paths": run.mc.n_paths,
        "utility": report.utility,
        "rows": report.rows,
    }))
}
