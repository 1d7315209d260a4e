//! `fregan`: train, sample, decompose, analyse spectra and run invariant checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fregan", version, about = "Frequency-aware GAN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a generator/discriminator pair; writes metrics.csv and checkpoints.
    Train(TrainArgs),
    /// Generate PNG samples from a checkpoint.
    Sample(SampleArgs),
    /// Multi-level Haar decomposition of one image into per-band PNGs and CSVs.
    Decompose(DecomposeArgs),
    /// Averaged power spectrum, radial profile and 0° slice of an image directory.
    Spectrum(SpectrumArgs),
    /// Radial spectrum distance between two image directories.
    Compare(CompareArgs),
    /// Run the invariant suites.
    Verify(VerifyArgs),
    /// Write a synthetic dataset as PNGs.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// sinusoid-mix[:K], checkerboard[:T] or gradient-blobs.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Train on the PNG/PPM files in this directory instead.
    #[arg(long, conflicts_with = "dataset")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub no_hfd: bool,
    #[arg(long)]
    pub no_hfa: bool,
    #[arg(long)]
    pub no_fsc: bool,
    /// Output directory (default: fregan-run).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DecomposeArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    pub dir: PathBuf,
    /// Images are area-resized to this square size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub dir_a: PathBuf,
    pub dir_b: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    /// Also write distance.txt and gap.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Perturb the Haar kernels by this amount before running the wavelet suites.
    #[arg(long, hide = true)]
    pub inject_kernel_fault: Option<f32>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Spectrum(a) => commands::spectrum(a),
        Command::Compare(a) => commands::compare(a),
        Command::Verify(a) => commands::verify(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
