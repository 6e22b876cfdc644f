//! Command-line front end: dataset generation, training, evaluation and the
//! classical baselines, each driven by a TOML config file.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "sysid", version, about = "Simulation-based parameter estimation for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a model and prior
    Gen(Common),
    /// Split a dataset into training and validation files
    Split(Common),
    /// Train one recurrent estimator
    Train(Common),
    /// Grid search over recurrent architectures
    Tune(Common),
    /// Evaluate estimators on a test set at a fixed parameter
    Eval(Common),
    /// Conditional-mean estimate by particle-marginal Metropolis-Hastings
    Mh(Common),
    /// Affine-estimator convergence grid for the FIR model
    LinearLab(Common),
    /// Fit the coupled-drives Wiener model by multi-start least squares
    DrivesFit(Common),
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML configuration file
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the master seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub threads: Option<usize>,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (name, common) = match &cli.command {
        Command::Gen(c) => ("gen", c),
        Command::Split(c) => ("split", c),
        Command::Train(c) => ("train", c),
        Command::Tune(c) => ("tune", c),
        Command::Eval(c) => ("eval", c),
        Command::Mh(c) => ("mh", c),
        Command::LinearLab(c) => ("linear-lab", c),
        Command::DrivesFit(c) => ("drives-fit", c),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::schema("--threads", "must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::schema("--threads", e.to_string()))?;
    }
    commands::dispatch(name, common)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
