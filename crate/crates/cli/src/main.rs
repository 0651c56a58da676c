//! `ss`: runs one springs-and-sticks experiment from a config file.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ss_core::experiments::{run_experiment, Config, Experiment};

#[derive(Parser, Debug)]
#[command(name = "ss", version, about = "Springs-and-sticks simulator and experiment drivers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `run.jobs`; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the lattice (and the network baselines) on one dataset.
    Fit(RunArgs),
    /// Loss and free energy against the stiffness scale.
    ScaleSweep(RunArgs),
    /// Learning barrier against the number of sticks.
    TlbExpressivity(RunArgs),
    /// Learning barrier over a friction-temperature grid.
    TlbHeatmap(RunArgs),
    /// Interpolation error against the number of sticks.
    ErrorScaling(RunArgs),
    /// Entropy production while the lattice relaxes.
    Entropy(RunArgs),
}

impl Command {
    fn split(self) -> (Experiment, RunArgs) {
        match self {
            Command::Fit(a) => (Experiment::Fit, a),
            Command::ScaleSweep(a) => (Experiment::ScaleSweep, a),
            Command::TlbExpressivity(a) => (Experiment::TlbExpressivity, a),
            Command::TlbHeatmap(a) => (Experiment::TlbHeatmap, a),
            Command::ErrorScaling(a) => (Experiment::ErrorScaling, a),
            Command::Entropy(a) => (Experiment::Entropy, a),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (experiment, args) = Cli::parse().command.split();

    let mut cfg = match Config::load(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.set("run.seed", seed);
    }
    if let Some(out) = &args.out {
        cfg.set("run.out", out.display());
    }
    if let Some(jobs) = args.jobs {
        cfg.set("run.jobs", jobs);
    }

    match run_experiment(experiment, &cfg) {
        Ok(summary) => {
            println!("{}", summary.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{experiment}: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
