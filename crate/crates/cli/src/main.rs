//! `cetx` experiment runner.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "cetx", version, about = "Counterfactual exogenous trajectories for time series forecasts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data generation, training and the optimizer.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic data set.
    Simulate,
    /// Grid-search forecasters and rank them by test MSE.
    Select,
    /// Fit the first model of the grid.
    Fit,
    /// Extract counterfactual exogenous trajectories at one anchor.
    Explain,
    /// Sweep anchors over the series and summarize the interventions.
    Importance,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    let ctx = Ctx::new(cfg, cli.quiet)?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Select => commands::select(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Explain => commands::explain(&ctx),
        Command::Importance => commands::importance(&ctx),
    }
}
