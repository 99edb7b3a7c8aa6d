//! `cdal` command-line driver.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cdal", version, about = "Few-step conditional diffusion segmentation with discriminator attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Export a synthetic dataset as images/ and masks/ PNG folders.
    Synth(SynthArgs),
    /// Train generator and discriminator.
    Train(TrainArgs),
    /// Write masks and probability maps for a folder of images.
    Predict(PredictArgs),
    /// Score predictions against ground-truth masks.
    Evaluate(EvaluateArgs),
    /// Train and score the attention-scale, no-attention and no-latent variants.
    Ablate(AblateArgs),
}

/// Options shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for training, synthesis and inference.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable discriminator attention (labels enter unweighted).
    #[arg(long)]
    pub no_attention: bool,
    /// Disable the latent pathway (z is all zeros).
    #[arg(long)]
    pub no_latent: bool,
    /// Discriminator feature size used for attention.
    #[arg(long, value_parser = ["16", "32", "64"])]
    pub attn_scale: Option<String>,
    /// Number of diffusion steps T.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Sampling instances averaged per prediction.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Binary decision threshold on the averaged probability.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Extra `section.key=value` overrides; see `cdal <command> --help` for defaults.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of samples (defaults to data.count).
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory, or a training output directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Folder of PNG images, or a dataset root containing images/.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to predict with before scoring.
    #[arg(long, conflicts_with = "pred")]
    pub checkpoint: Option<PathBuf>,
    /// Folder of existing masks (`<stem>.pred.png` or `<stem>.png`) to score without a model.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training seeds; one row per variant and seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| c.downcast_ref::<cdal::Error>().is_some_and(cdal::Error::is_config));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
