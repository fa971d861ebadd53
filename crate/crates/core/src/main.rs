//! Command-line front end: `simulate`, `verify`, `she`, `report`.
//!
//! Exit code 0 iff every asserted check passed, 1 on failed checks, 2 on
//! errors.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use kpzlab::harness::jobs::{load_toml, run_she, run_simulate, SheConfig, SimulateConfig};
use kpzlab::harness::{collect_reports, run_experiment, ExperimentConfig, ExperimentId};

#[derive(Parser)]
#[command(name = "kpzlab", version, about = "Exclusion-process simulation and KPZ/SHE verification laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories described by a TOML file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one experiment (identities, E1..E9) and check its thresholds.
    Verify {
        id: String,
        /// TOML experiment configuration; defaults to the built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the output directory of the configuration.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample the continuum stochastic heat equation.
    She {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize every report found below a directory.
    Report { dir: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Simulate { config } => {
            let cfg: SimulateConfig = load_toml(&config)?;
            let files = run_simulate(&cfg)?;
            println!("wrote {} files to {}", files.len(), cfg.output.display());
            Ok(true)
        }
        Command::Verify { id, config, output } => {
            let id: ExperimentId = id.parse()?;
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => ExperimentConfig::defaults(id),
            };
            if cfg.id != id {
                anyhow::bail!("configuration is for {} but {} was requested", cfg.id, id);
            }
            if output.is_some() {
                cfg.output = output;
            }
            let start = Instant::now();
            let report = run_experiment(&cfg)?;
            print!("{}", report.summary());
            for note in &report.notes {
                println!("  note: {note}");
            }
            println!("  elapsed: {:.1}s", start.elapsed().as_secs_f64());
            Ok(report.passed())
        }
        Command::She { config } => {
            let cfg: SheConfig = load_toml(&config)?;
            let path = run_she(&cfg)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Report { dir } => {
            let reports = collect_reports(&dir)?;
            if reports.is_empty() {
                anyhow::bail!("no report.json below {}", dir.display());
            }
            for r in &reports {
                print!("{}", r.summary());
            }
            Ok(reports.iter().all(|r| r.passed()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
