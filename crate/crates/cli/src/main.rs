//! `cmim`: train, sweep, evaluate and report on cMIM-family models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmim_core::models::Objective;

use crate::commands::CliError;
use crate::config::{Experiment, FileConfig};

#[derive(Parser, Debug)]
#[command(name = "cmim", version, about = "Contrastive MIM representation-learning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize 1000 first-quadrant 2D points under the discriminator loss.
    Toy2d(Common),
    /// Train one model and write its checkpoint and loss history.
    Train(Common),
    /// Train and evaluate every (objective, batch size, seed) cell.
    Sweep(Common),
    /// Run all probes on a trained checkpoint.
    Evaluate {
        /// Checkpoint written by `train` or `sweep`.
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate every records.csv below a directory into plot-ready tables.
    Report {
        /// Directory searched recursively for records.csv files.
        records: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Default to full-length runs instead of desk-scale ones.
    #[arg(long)]
    full_scale: bool,
    /// Runs trained in parallel by `sweep`.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn overrides(&self) -> FileConfig {
        FileConfig {
            seed: self.seed,
            out: self.out.clone(),
            objective: self.objective,
            batch_size: self.batch_size,
            steps: self.steps,
            tau: self.tau,
            full_scale: self.full_scale.then_some(true),
            jobs: self.jobs,
            ..Default::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (experiment, common, extra) = match cli.command {
        Command::Toy2d(c) => (Experiment::Toy2d, c, FileConfig::default()),
        Command::Train(c) => (Experiment::Train, c, FileConfig::default()),
        Command::Sweep(c) => (Experiment::Sweep, c, FileConfig::default()),
        Command::Evaluate { checkpoint, common } => {
            (Experiment::Evaluate, common, FileConfig { checkpoint, ..Default::default() })
        }
        Command::Report { records, common } => {
            (Experiment::Report, common, FileConfig { records, ..Default::default() })
        }
    };
    let raw = match &common.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let file = match &raw {
        Some(text) => FileConfig::parse(text).map_err(|e| CliError::Io(format!("config: {e}")))?,
        None => FileConfig::default(),
    };
    let merged = file.merge(common.overrides()).merge(extra);
    let resolved = config::ExperimentConfig::resolve(experiment, merged)?;
    commands::execute(&resolved, raw.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
