use std::fs;
use std::path::Path;
use std::process::Command;

use futopt_cli::{parse_config, run_experiment, Experiment, RunOptions};

const SMALL: &str = r#"
[market]
n_steps = 40
delta_t = 0.01
sigma = [[0.2, 0.0], [0.05, 0.25]]
rho = [[1.0, 0.3], [0.3, 1.0]]
alpha = [[-0.5, 0.0], [0.0, -0.5]]
varsigma = [[0.05, 0.0], [0.0, 0.05]]
f = [50.0, 20.0]
c_spread = [0.01, 0.02]
f0 = [100.0, 80.0]
beta0 = [0.06, 0.04]
r = 0.02

[mc]
n_paths = 300
seed = 11
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_futopt"))
}

fn read_artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn artifacts_do_not_depend_on_worker_count() {
    let cfg = parse_config(SMALL).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for exp in [Experiment::Backtest, Experiment::VerifyMeasure, Experiment::OptimalityProbe] {
        let mut seen = Vec::new();
        for workers in [1, 3, 8] {
            let dir = tmp.path().join(format!("{}-{workers}", exp.as_str()));
            let opts = RunOptions { out: Some(dir.clone()), workers: Some(workers), ..Default::default() };
            let summary = run_experiment(&cfg, exp, &opts).unwrap();
            assert!(summary.ok(), "{:?}", summary.failures);
            seen.push(read_artifacts(&dir));
        }
        assert!(!seen[0].is_empty());
        assert_eq!(seen[0], seen[1], "{}", exp.as_str());
        assert_eq!(seen[0], seen[2], "{}", exp.as_str());
    }
}

#[test]
fn seed_override_changes_output() {
    let cfg = parse_config(SMALL).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = |seed| {
        let dir = tmp.path().join(format!("s{seed}"));
        let opts = RunOptions { out: Some(dir.clone()), seed: Some(seed), paths: Some(1), ..Default::default() };
        run_experiment(&cfg, Experiment::Simulate, &opts).unwrap();
        fs::read(dir.join("path.csv")).unwrap()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn manifest_lists_hashes() {
    let cfg = parse_config(SMALL).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let opts = RunOptions { out: Some(tmp.path().into()), paths: Some(3), ..Default::default() };
    let summary = run_experiment(&cfg, Experiment::Simulate, &opts).unwrap();
    assert_eq!(summary.artifacts.len(), 4);
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["experiment"], "simulate");
    assert_eq!(m["n_paths"], 3);
    assert_eq!(m["seed"], 11);
    let arts = m["artifacts"].as_array().unwrap();
    assert_eq!(arts.len(), 4);
    assert!(arts.iter().all(|a| a["sha256"].as_str().unwrap().len() == 64));
    assert!(tmp.path().join("path_00002.csv").exists());
}

#[test]
fn binary_simulates_one_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("out");
    let status = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--paths", "1", "--seed", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(out.join("path.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, "time,F_1,F_2,R_1,R_2,beta_1,beta_2");
    assert_eq!(text.lines().count(), 42);
}

#[test]
fn binary_reports_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, SMALL.replace("r = 0.02", "m = 1.5")).unwrap();
    let out = bin().args(["backtest", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('m'), "{err}");

    let missing = bin().args(["run", "--config"]).arg(tmp.path().join("nope.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    fs::write(&cfg, SMALL).unwrap();
    let no_exp = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(no_exp.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_exp.stderr).contains("no experiment"));
}

#[test]
fn run_uses_experiment_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, format!("experiment = \"cost-sweep\"\n{SMALL}")).unwrap();
    let out = tmp.path().join("out");
    let status = bin()
        .args(["run", "--paths", "4", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let sweep = fs::read_to_string(out.join("cost_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 * 2);
}

#[test]
fn backtest_reads_price_file() {
    let tmp = tempfile::tempdir().unwrap();
    let prices = tmp.path().join("prices.csv");
    let mut rows = String::from("time,p1\n");
    for n in 0..60 {
        let t = n as f64 * 0.01;
        rows.push_str(&format!("{t},{}\n", 100.0 * (1.0 + 0.02 * (n as f64 * 0.7).sin())));
    }
    fs::write(&prices, rows).unwrap();
    let text = format!(
        "[market]\nn_steps = 10\ndelta_t = 0.01\nsigma = [[0.2]]\nbeta0 = [0.05]\n[data]\nprices_csv = \"{}\"\n",
        prices.display()
    );
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("out");
    let status = bin().args(["backtest", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let wealth = fs::read_to_string(out.join("wealth.csv")).unwrap();
    assert_eq!(wealth.lines().count(), 61);
    assert!(out.join("diagnostics.csv").exists());
}
