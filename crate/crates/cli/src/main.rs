mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Phase spectrum prediction, Griffin-Lim baseline and objective evaluation.
#[derive(Debug, Parser)]
#[command(name = "nspp", version)]
pub struct Cli {
    /// Seed for every random choice (training init and crops, random GL init).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for file-level parallelism in extract, gl and eval.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write amplitude and phase spectrograms of every WAV in a directory.
    Extract(ExtractArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Predict phase with a trained model and resynthesize waveforms.
    Predict(PredictArgs),
    /// Griffin-Lim reconstructions from amplitude spectra.
    Gl(GlArgs),
    /// Inverse STFT of a stored amplitude and phase pair.
    Reconstruct(ReconstructArgs),
    /// Compare two directories of WAVs (SNR, F0-RMSE, RTF).
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config; only its [stft] table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint of an earlier run with the same model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A WAV, an amplitude PHSC file, or a directory of either.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output length in samples; required for PHSC input.
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GlArgs {
    /// A WAV, an amplitude PHSC file, or a directory of either.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub iters: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Output length in samples; required for PHSC input.
    #[arg(long)]
    pub length: Option<usize>,
    /// Start from uniform random phase (drawn from --seed) instead of zero.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Amplitude PHSC file.
    #[arg(long)]
    pub amp: PathBuf,
    /// Phase PHSC file.
    #[arg(long)]
    pub phase: PathBuf,
    #[arg(long)]
    pub length: usize,
    /// Output WAV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// System name shown in the table.
    #[arg(long, default_value = "test")]
    pub system: String,
    /// Timing file written by `predict` to include generation time and RTF.
    #[arg(long)]
    pub timing: Option<PathBuf>,
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
