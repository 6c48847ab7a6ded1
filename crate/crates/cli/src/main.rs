//! `kdvr`: config-driven distillation experiments.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "kdvr", version, about = "Self-distillation as partial variance reduction: experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for concurrent runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; override `seeds` in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (lambda, seed) pair and write traces and a summary.
    Train(Common),
    /// As `train`, then report the best lambda.
    SweepLambda(Common),
    /// Teacher quality, optimal weight and constants; gap statistics for networks.
    Diagnose(Common),
    /// Run the property suite; with a config, also report its constants.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert the configured dataset to CSV.
    Ingest(Common),
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Train(c) => commands::train(c.load()?).map(|_| ()),
        Command::SweepLambda(c) => commands::sweep_lambda(c.load()?),
        Command::Diagnose(c) => commands::diagnose(c.load()?),
        Command::Verify { config, out } => {
            let cfg = config.map(|p| ExperimentConfig::load(&p)).transpose()?;
            commands::verify(cfg, out.as_deref())
        }
        Command::Ingest(c) => commands::ingest(c.load()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kdvr: {e}");
            e.exit_code()
        }
    }
}
