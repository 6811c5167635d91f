//! Experiment driver: JSON configs in, CSV data and a hashed JSON manifest out.

pub mod commands;
pub mod config;
pub mod output;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::CommonArgs;
use crate::output::OutputDir;

#[derive(Parser, Debug)]
#[command(name = "manyserver", version, about = "Numerical laboratory for the many-server diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check the standing assumptions on a service law.
    VerifyDistribution(CommonArgs),
    /// Simulate paths of (X, K, Z) with equation residuals.
    SimulateDiffusion(CommonArgs),
    /// Simulate the prelimit queue and its scaled state.
    SimulateQueue(CommonArgs),
    /// Couple two initial conditions on the same noise.
    Coupling(CommonArgs),
    /// Long-horizon moments of the diffusion model.
    Stationary(CommonArgs),
    /// Empirical orders of the equation residuals on nested grids.
    ConvergenceOrder(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::VerifyDistribution(_) => "verify-distribution",
            Command::SimulateDiffusion(_) => "simulate-diffusion",
            Command::SimulateQueue(_) => "simulate-queue",
            Command::Coupling(_) => "coupling",
            Command::Stationary(_) => "stationary",
            Command::ConvergenceOrder(_) => "convergence-order",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::VerifyDistribution(a)
            | Command::SimulateDiffusion(a)
            | Command::SimulateQueue(a)
            | Command::Coupling(a)
            | Command::Stationary(a)
            | Command::ConvergenceOrder(a) => a,
        }
    }
}

/// What a subcommand reports back for the manifest.
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub summary: serde_json::Value,
}

/// Runs one subcommand; on error no output files are left behind.
pub fn run(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let cfg = config::load(args)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("cannot start worker threads")?;
    let mut out = OutputDir::create(&args.out)?;
    let res = pool.install(|| match &cli.command {
        Command::VerifyDistribution(_) => commands::verify_distribution(&cfg, &mut out),
        Command::SimulateDiffusion(_) => commands::simulate_diffusion(&cfg, &mut out),
        Command::SimulateQueue(_) => commands::simulate_queue(&cfg, &mut out),
        Command::Coupling(_) => commands::coupling(&cfg, &mut out),
        Command::Stationary(_) => commands::stationary(&cfg, &mut out),
        Command::ConvergenceOrder(_) => commands::convergence_order(&cfg, &mut out),
    })?;
    let manifest = json!({
        "command": cli.command.name(),
        "versions": { "manyserver": env!("CARGO_PKG_VERSION") },
        "config": cfg,
        "seeds": res.seeds,
        "summary": res.summary,
        "files": out.files(),
    });
    out.write_json("manifest.json", &manifest)?;
    out.finish();
    Ok(())
}
