//! Command-line front end: `curate`, `train`, `sample` and `evaluate`.
//!
//! Every command writes a `run.json` record (config hash, seed, code
//! version, timestamps, output digests) next to its outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod record;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::evaluate::{parse_fake, SplitArg};
use commands::train::ModelKind;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "artifactgen", version, about = "Label-conditioned artifact window synthesis and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut recordings (or a synthetic corpus) into normalized windows with a manifest.
    Curate {
        #[arg(long)]
        config: PathBuf,
        /// Directory of recording JSON files.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Use the built-in synthetic artifact corpus instead of --input.
        #[arg(long)]
        synthetic: bool,
        /// Output directory; defaults to `<output_dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        /// Defaults to `<output_dir>/data/manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `<output_dir>/<model>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw windows of one class from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to ARTIFACTGEN_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// DDIM steps (DDPM only).
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale w (DDPM only).
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// Clamp predicted x0 to [-c, c] at every step (DDPM only).
        #[arg(long)]
        clip_x0: Option<f64>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Compare generated window directories against a real manifest.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Real manifest.
        #[arg(long)]
        real: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// NAME=DIR of generated windows; repeatable.
        #[arg(long = "fake", value_parser = parse_fake, required = true)]
        fakes: Vec<(String, PathBuf)>,
        /// Defaults to `<output_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::Curate { config, input, synthetic, out } => {
            commands::curate::run(&commands::curate::CurateArgs { config, input, synthetic, out })
        }
        Command::Train { config, model, manifest, out } => {
            commands::train::run(&commands::train::TrainArgs { config, model, manifest, out })
        }
        Command::Sample { checkpoint, class, num, out, seed, steps, guidance, eta, clip_x0, batch } => {
            commands::sample::run(&commands::sample::SampleArgs {
                checkpoint,
                class,
                num,
                out,
                seed,
                steps,
                guidance,
                eta,
                clip_x0,
                batch,
            })
        }
        Command::Evaluate { config, real, split, fakes, out } => {
            commands::evaluate::run(&commands::evaluate::EvaluateArgs { config, real, split, fakes, out })
        }
    }
}
