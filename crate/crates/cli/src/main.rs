use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use futopt_cli::{load_config, run_experiment, Experiment, RunOptions, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "futopt", version, about = "Futures market simulation and log-optimal trading experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate price, return and drift paths.
    Simulate(Common),
    /// Backtest the configured strategy on simulated paths or a price file.
    Backtest(Common),
    /// Monte Carlo martingale checks of the change of measure.
    VerifyMeasure(Common),
    /// Utility validation battery and optimal terminal wealth.
    DualityReport(Common),
    /// Slippage cost term across grid spacings.
    CostSweep(Common),
    /// Compare the log-optimal policy against perturbed policies.
    OptimalityProbe(Common),
    /// Run the experiment named in the config file.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (fixed, common) = match cli.command {
        Command::Simulate(c) => (Some(Experiment::Simulate), c),
        Command::Backtest(c) => (Some(Experiment::Backtest), c),
        Command::VerifyMeasure(c) => (Some(Experiment::VerifyMeasure), c),
        Command::DualityReport(c) => (Some(Experiment::DualityReport), c),
        Command::CostSweep(c) => (Some(Experiment::CostSweep), c),
        Command::OptimalityProbe(c) => (Some(Experiment::OptimalityProbe), c),
        Command::Run(c) => (None, c),
    };
    let cfg = match load_config(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let Some(experiment) = fixed.or(cfg.experiment) else {
        eprintln!("error: no experiment given on the command line or in the config");
        return ExitCode::from(1);
    };
    let opts = RunOptions {
        out: common.out,
        seed: common.seed,
        paths: common.paths,
        workers: common.workers,
    };
    match run_experiment(&cfg, experiment, &opts) {
        Ok(summary) if summary.ok() => {
            println!("{}: wrote {} artifacts to {}", summary.experiment, summary.artifacts.len(), summary.out_dir.display());
            ExitCode::SUCCESS
        }
        Ok(summary) => {
            let report = serde_json::json!({"experiment": summary.experiment, "failures": summary.failures});
            eprintln!("{report}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
