#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::error;

mod commands;
mod config;

use commands::{AcceptanceFailure, RunOptions};
use config::Loaded;

/// Optimal impact-time guidance pipeline: data generation, filtering,
/// Gaussian-process training and closed-loop evaluation.
#[derive(Parser)]
#[command(name = "optiguide", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate optimal trajectories over the configured grid.
    Generate(Common),
    /// Filter the generated dataset.
    Filter(Common),
    /// Fit the Gaussian-process model.
    Train(Common),
    /// Simulate the configured cases.
    Simulate(Common),
    /// Simulate the configured grid of cases.
    Sweep(Common),
    /// Summarize the artifacts in the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for simulation batches.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write an SVG plot per simulated case.
    #[arg(long)]
    emit_svg: bool,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Generate(c)
    | Command::Filter(c)
    | Command::Train(c)
    | Command::Simulate(c)
    | Command::Sweep(c)
    | Command::Report(c)) = &cli.command;
    let cfg = Loaded::read(&c.config, c.seed)?;
    let jobs = match c.jobs {
        Some(0) => anyhow::bail!(optiguide::Error::InvalidConfig("--jobs must be at least 1".into())),
        Some(j) => j,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let opts = RunOptions { jobs, emit_svg: c.emit_svg };
    log::info!("config hash {} seed {}", cfg.hash, cfg.config.seed);
    match cli.command {
        Command::Generate(_) => commands::generate(&cfg),
        Command::Filter(_) => commands::filter(&cfg),
        Command::Train(_) => commands::train_model(&cfg),
        Command::Simulate(_) => commands::simulate(&cfg, opts),
        Command::Sweep(_) => commands::sweep(&cfg, opts),
        Command::Report(_) => commands::report(&cfg),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use optiguide::Error as E;
    for cause in err.chain() {
        if cause.is::<AcceptanceFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NumericalBlowup(_)
                | E::SingularSensitivity(_)
                | E::NoConvergence { .. }
                | E::TooManySkipped { .. }
                | E::NotPositiveDefinite
                | E::DegenerateNeighborhood(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OPTIGUIDE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn exit_codes_follow_error_kind() {
        let numerical: anyhow::Error = optiguide::Error::NoConvergence { iterations: 3, residual: 1.0 }.into();
        assert_eq!(exit_code(&numerical.context("while generating")), 2);
        let invalid: anyhow::Error = optiguide::Error::InvalidConfig("x".into()).into();
        assert_eq!(exit_code(&invalid), 1);
        let failed: anyhow::Error = AcceptanceFailure("case 0".into()).into();
        assert_eq!(exit_code(&failed), 3);
        let io = std::fs::read("/nonexistent/file").context("reading");
        assert_eq!(exit_code(&io.unwrap_err()), 1);
    }
}
