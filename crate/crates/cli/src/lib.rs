//! Command-line driver for ensemble bridges.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use serde_json::Value;

use commands::{Context, Mode, SimulateArgs};
use config::LoadedConfig;
use error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Terminal state map, averaged input map and controllability Gramian.
    Gramian,
    /// Kernel and Schrödinger potentials for the configured marginals.
    Solve,
    /// Simulated trajectories, one CSV per seed.
    Simulate,
    /// Endpoint histogram against the target density.
    Montecarlo,
    /// Oracle and reduction checks.
    Verify,
}

#[derive(Debug, Parser)]
#[command(name = "ensemble-bridge", version, about = "Optimal steering of stochastic linear ensembles")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration (optional for `verify`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of noise seeds for `simulate`.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = Mode::Pinned)]
    pub mode: Mode,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<String>,
    /// Terminal state for the pinned law, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub xf: Option<String>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Runs the suite against a pinned law with the noise compensation sign flipped.
    #[arg(long, hide = true)]
    pub flip_noise_sign: bool,
}

/// Runs one command and returns its JSON report.
pub fn run(cli: &Cli) -> CliResult<Value> {
    let cfg = cli.config.as_deref().map(LoadedConfig::load).transpose()?;
    if cli.command == Command::Verify {
        return commands::cmd_verify(cfg.as_ref(), cli.out.as_deref(), cli.flip_noise_sign);
    }
    let cfg = cfg.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let ctx = Context::new(cfg, cli.out.clone())?;
    match cli.command {
        Command::Gramian => commands::cmd_gramian(&ctx),
        Command::Solve => commands::cmd_solve(&ctx),
        Command::Simulate => commands::cmd_simulate(
            &ctx,
            &SimulateArgs { mode: cli.mode, seeds: cli.seeds, x0: cli.x0.clone(), xf: cli.xf.clone() },
        ),
        Command::Montecarlo => commands::cmd_montecarlo(&ctx),
        Command::Verify => unreachable!(),
    }
}
