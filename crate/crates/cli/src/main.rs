//! `foe`: simulate, train, reconstruct and evaluate snapshot microscopes.

mod commands;
mod config;
mod preview;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Preset;
use foe_core::optics::MaskInit;

#[derive(Parser, Debug)]
#[command(name = "foe", version, about = "Differentiable snapshot microscope toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment-driven subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment config; its sections override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Geometry preset: a reference dataset type or the desk-sized toy.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seed for phantoms, noise and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shard worker count for training.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Where the phase mask comes from.
#[derive(Args, Debug, Clone)]
pub struct MaskSource {
    /// Named initializer for the phase mask.
    #[arg(long, value_parser = parse_init, conflicts_with = "phi")]
    pub init: Option<MaskInit>,
    /// Phase mask tensor file.
    #[arg(long)]
    pub phi: Option<PathBuf>,
}

fn parse_init(s: &str) -> Result<MaskInit, String> {
    s.parse().map_err(|e: foe_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the PSF stack of a phase mask.
    Psf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mask: MaskSource,
    },
    /// Image a volume through a phase mask and add shot noise.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mask: MaskSource,
        /// Volume to image; a seeded phantom when absent.
        #[arg(long)]
        volume: Option<PathBuf>,
    },
    /// Jointly train the phase mask and the decoder.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mask: MaskSource,
        /// Training iterations.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train the decoder for a fixed phase mask.
    TrainDecoder {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        mask: MaskSource,
        /// Training iterations.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Reconstruct a volume from a camera image with a trained decoder.
    Reconstruct {
        /// Training output directory holding `decoder/`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera image tensor file.
        #[arg(long)]
        image: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare a reconstruction with the ground truth.
    Eval {
        /// Ground-truth volume.
        #[arg(long)]
        truth: PathBuf,
        /// Reconstructed volume.
        #[arg(long)]
        recon: PathBuf,
        /// Also write `metrics.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every gradient against central finite differences.
    Gradcheck {
        /// Seed for the random test inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Also write `gradcheck.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time Fourier against direct convolution with a global kernel.
    Bench {
        /// Square input sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64, 128, 256])]
        sizes: Vec<usize>,
        /// Timed repetitions per size (median reported).
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write a seeded phantom volume.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
