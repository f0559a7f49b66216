//! `sefi`: train identity tokens on one face image, sample with them, run
//! the progressive token ablations, dump attention heatmaps and score
//! generated images.
//!
//! Exit codes: 0 success, 1 runtime or input failure, 2 usage or
//! configuration error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sefi_core::SefiError;

use config::{AblateMode, BackendKind, RunConfig, ScorerKind};

/// A problem with how the command was invoked (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "sefi",
    version,
    about = "Stage-wise K/V identity embeddings for text-to-image diffusion"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.rng_seed` and `sample.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize the token expander on one face image.
    Train(TrainArgs),
    /// Sample an image with one or more trained identities.
    Sample(SampleArgs),
    /// Progressive add / substitute token ablations, or a training grid.
    Ablate(AblateArgs),
    /// Per-token cross-attention heatmaps at chosen timesteps.
    VisualizeAttn(VisualizeArgs),
    /// Prompt, ID, Detect and ID(Prompt) metrics over a manifest.
    Eval(EvalArgs),
}

fn loss_option_arg() -> clap::builder::RangedI64ValueParser<u8> {
    clap::value_parser!(u8).range(1..=3)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Face image (PNG or JPEG).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long, value_parser = loss_option_arg())]
    pub loss_option: Option<u8>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// One checkpoint per identity placeholder (`V*`, or `V1*`, `V2*`, ...).
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Base name of the PNG and its JSON sidecar.
    #[arg(long, default_value = "sample")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub mode: Option<AblateMode>,
    /// Base checkpoint, then the substitute checkpoint in substitute mode.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Comma-separated token counts.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub order: Option<TokenOrderArg>,
    /// Face image for train-grid mode.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Loss options for train-grid mode.
    #[arg(long, value_delimiter = ',', value_parser = loss_option_arg())]
    pub loss_options: Option<Vec<u8>>,
    /// Token pair counts for train-grid mode.
    #[arg(long, value_delimiter = ',')]
    pub n_pairs: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TokenOrderArg {
    StageMajor,
    PathMajor,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Comma-separated timesteps.
    #[arg(long, value_delimiter = ',', required = true)]
    pub timesteps: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON-lines manifest of `{image, prompt}` records.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Reference face image for the ID score.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerKind>,
    /// Precomputed score table for the table scorer.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<SefiError>() {
            return match e {
                SefiError::Config(_) | SefiError::Prompt(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.rng_seed = seed;
        config.sample.seed = seed;
    }
    if let Some(kind) = cli.backend {
        config.backend.kind = kind;
    }
    let ctx = commands::Context::new(config, cli.out)?;
    match cli.command {
        Command::Train(a) => commands::train(&ctx, a),
        Command::Sample(a) => commands::sample(&ctx, a),
        Command::Ablate(a) => commands::ablate(&ctx, a),
        Command::VisualizeAttn(a) => commands::visualize_attn(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&UsageError("x".into()).into()), 2);
        assert_eq!(exit_code(&SefiError::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&SefiError::Input("x".into()).into()), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
        let wrapped = anyhow::Error::from(SefiError::Prompt("x".into())).context("sampling");
        assert_eq!(exit_code(&wrapped), 2);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        assert!(
            Cli::try_parse_from(["sefi", "train", "--image", "a.png", "--loss-option", "4"])
                .is_err()
        );
        assert!(
            Cli::try_parse_from(["sefi", "train", "--image", "a.png", "--loss-option", "2"])
                .is_ok()
        );
    }
}
