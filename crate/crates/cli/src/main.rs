//! `spectralnet`: preprocess a hyperspectral cube, train, evaluate, and dump
//! wavelet subbands. Commands share a run directory (`--out`) holding
//! on-disk caches, a `run.json` record and a lock file.
//!
//! Exit codes: 0 ok, 2 input or I/O error, 3 factor analysis did not
//! converge, 4 training diverged, 5 artifact does not match the config.

mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spectralnet::{CheckpointError, DataError, TrainError};

use commands::Mismatch;
use config::{ConfigArgs, RunConfig};

#[derive(Parser)]
#[command(name = "spectralnet", version, about = "Wavelet-fused CNN for hyperspectral pixel classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Standardize, reduce bands by factor analysis and cache labeled patches.
    Preprocess(ConfigArgs),
    /// Split the cached patches and train; writes a checkpoint and history.csv.
    Train(ConfigArgs),
    /// Score a checkpoint on the held-out split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory (default: the run's own).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write every Haar subband of an (H, W) or (H, W, C) NPY image.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        /// Default: as many as the image allows, at most 4.
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, default_value = "spectralnet-run")]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Mismatch>() {
            return 5;
        }
        match cause.downcast_ref::<CheckpointError>() {
            Some(CheckpointError::Mismatch { .. }) => return 5,
            Some(_) => return 2,
            None => {}
        }
        if let Some(DataError::NonConvergence { .. } | DataError::Numeric(_)) = cause.downcast_ref::<DataError>() {
            return 3;
        }
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref::<TrainError>() {
            return 4;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess(args) => commands::preprocess(&RunConfig::resolve(&args)?),
        Command::Train(args) => commands::train(&RunConfig::resolve(&args)?, (args.bands, args.patch)),
        Command::Evaluate { config, checkpoint } => {
            commands::evaluate_cmd(&RunConfig::resolve(&config)?, (config.bands, config.patch), checkpoint.as_deref())
        }
        Command::Decompose { input, levels, out } => commands::decompose(&input, levels, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
