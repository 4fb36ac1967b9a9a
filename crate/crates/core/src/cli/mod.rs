//! Command-line harness: `kernel-newton train|bench|diag --config <file>
//! [--set key=value]... [--jobs N] [--out DIR]`.
//!
//! Timing comparisons should use `--jobs 1`; parallel runs share cores and
//! inflate each other's wall times.

pub mod commands;
pub mod config;
pub mod table;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_bench, cmd_diag, cmd_train};
pub use config::RunConfig;

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "kernel-newton",
    version,
    about = "Newton-type training of kernel logistic regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One run per configured method.
    Train(CommonArgs),
    /// Repeated runs with mean and standard-error aggregation.
    Bench(CommonArgs),
    /// μ, feature-ratio, spectral-error and containment sweeps.
    Diag(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config leaf by dotted path, e.g. `methods.0.mu=1e-6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for independent runs (forced to 1 in deterministic mode).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let cfg = RunConfig::load(&self.config, &self.overrides)?;
        let out = self.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        Ok((cfg, out))
    }
}

/// Runs a parsed command and returns the files it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Train(args) => {
            let (cfg, out) = args.load()?;
            cmd_train(&cfg, &out)
        }
        Command::Bench(args) => {
            let (cfg, out) = args.load()?;
            let report = cmd_bench(&cfg, &out, args.jobs)?;
            let mut files = report.run_paths;
            files.push(report.aggregate_path);
            Ok(files)
        }
        Command::Diag(args) => {
            let (cfg, out) = args.load()?;
            cmd_diag(&cfg, &out, args.jobs)
        }
    }
}
