//! `tsinc`: batch runner and validator for two-timescale recursive inclusions.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tsinc", version, about = "Two-timescale stochastic recursive inclusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to $TSINC_OUT, then the config's `output`, then ./out.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Independent seeds `seed, seed+1, …`, each in its own subdirectory.
    #[arg(long, default_value_t = 1)]
    pub replicas: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check drift maps, averaged fields and the step schedule.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Simulate the recursion and write trajectory and diagnostics CSVs.
    Run(RunArgs),
    /// Integrate the averaged inclusion with the Euler scheme.
    SolveDi {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the value-function comparison (saddle problems only).
        #[arg(long)]
        envelope: bool,
    },
    /// Primal-dual run of a saddle problem with an optimality report.
    Saddle(RunArgs),
}

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Invalid = 1,
    Diverged = 2,
    Io = 3,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { common, steps } => commands::validate(&common, steps),
        Command::Run(args) => commands::run(&args, false),
        Command::SolveDi { common, envelope } => commands::solve_di(&common, envelope),
        Command::Saddle(args) => commands::run(&args, true),
    };
    let status = match result {
        Ok(status) => status,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            failure.status
        }
    };
    ExitCode::from(status as u8)
}
