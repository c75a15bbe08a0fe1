//! Command-line front end for `primal-attention`: the stationarity
//! verification grid, training runs, spectrum analysis and the efficiency
//! benchmark, with their configuration and file formats.

pub mod commands;
pub mod config;
mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "primal",
    version,
    about = "Primal attention verification, training and analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the dual solution and stationary parameters over a random grid.
    Verify(CommonArgs),
    /// Train a model (or one per eta) and write logs and checkpoints.
    Train(CommonArgs),
    /// Singular value spectrum of a matrix file or a trained head.
    Spectrum(CommonArgs),
    /// Time primal and canonical attention over growing sequence lengths.
    Bench(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed except the dataset's.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::Fail => 1,
        }
    }
}

/// Loads the configuration, echoes it into the output directory and runs
/// the command.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let args = match &cli.command {
        Command::Verify(a) | Command::Train(a) | Command::Spectrum(a) | Command::Bench(a) => a,
    };
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(args.seed);
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set \"out\" in the config".into()))?;
    io::create_dir(&out)?;
    io::write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
    match cli.command {
        Command::Verify(_) => commands::verify::run(&cfg.verify, &out),
        Command::Train(_) => commands::train::run(&cfg, &out),
        Command::Spectrum(_) => commands::spectrum::run(&cfg.spectrum, &out),
        Command::Bench(_) => commands::bench::run(&cfg.bench, &out),
    }
}
