//! Command-line driver for batch decoding, sweeps, heatmaps and scoring.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 data error (see
//! [`error::exit`]).

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sparse-rnnt", version, about = "Sparse-attention RNN-T decoding, sweeps and scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random model file.
    GenModel(commands::GenModelArgs),
    /// Transcribe WAV or feature files.
    Decode(commands::DecodeArgs),
    /// Score a grid of mask policies and segmentations against references.
    Sweep(commands::SweepArgs),
    /// Dump one layer/head's post-softmax attention as CSV.
    Heatmap(commands::HeatmapArgs),
    /// Character error rate of hypotheses against references.
    Eval(commands::EvalArgs),
    /// Attention mask density per layer and head.
    Stats(commands::StatsArgs),
    /// Print segment boundaries as CSV.
    Segment(commands::SegmentArgs),
    /// Compute log-mel features of a WAV file.
    Features(commands::FeaturesArgs),
    /// Print the built-in run and model defaults as JSON.
    Defaults,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::Decode(a) => commands::decode(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Heatmap(a) => commands::heatmap(a),
        Command::Eval(a) => commands::eval(a),
        Command::Stats(a) => commands::stats(a),
        Command::Segment(a) => commands::segment(a),
        Command::Features(a) => commands::features(a),
        Command::Defaults => io::emit(None, commands::defaults_json().as_bytes()),
    }
}
