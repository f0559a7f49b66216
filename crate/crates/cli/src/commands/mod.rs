mod ablate;
mod eval;
mod sample;
mod train;
mod visualize;

pub use ablate::ablate;
pub use eval::eval;
pub use sample::sample;
pub use train::train;
pub use visualize::visualize_attn;

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use sefi_core::backend::{ddim_sample, DiffusionBackend, SampleOptions};
use sefi_core::checkpoint::Checkpoint;
use sefi_core::conditioning::{build_prompt, PromptSpec};
use sefi_core::imaging::Image;
use sefi_core::stage_scheduler::StageSchedule;
use sefi_core::tensor::Matrix;
use sefi_core::token_expander::ExpandedTokenSet;

use crate::config::RunConfig;
use crate::UsageError;

pub const DEFAULT_PROMPT: &str = "a photo of the face of V*";

pub struct Context {
    pub config: RunConfig,
    pub backend: Box<dyn DiffusionBackend>,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf) -> anyhow::Result<Self> {
        let backend = config.build_backend()?;
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self {
            config,
            backend,
            out,
        })
    }

    pub fn backend(&self) -> &dyn DiffusionBackend {
        self.backend.as_ref()
    }

    pub fn prompt_text(&self, flag: Option<&String>) -> String {
        flag.cloned()
            .or_else(|| self.config.sample.prompt.clone())
            .unwrap_or_else(|| DEFAULT_PROMPT.into())
    }
}

pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn load_checkpoint(
    path: &Path,
    backend: &dyn DiffusionBackend,
) -> anyhow::Result<LoadedCheckpoint> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let checkpoint = Checkpoint::from_bytes(&bytes)
        .with_context(|| format!("parsing checkpoint {}", path.display()))?;
    checkpoint.check_backend(backend.descriptor())?;
    Ok(LoadedCheckpoint {
        checkpoint,
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// A prompt with one placeholder per checkpoint; mismatches are usage errors.
pub fn identity_prompt(
    text: &str,
    identities: usize,
    backend: &dyn DiffusionBackend,
) -> anyhow::Result<PromptSpec> {
    build_prompt(text, backend, identities).map_err(|e| {
        UsageError(format!(
            "prompt '{text}' does not fit {identities} checkpoint(s): {e}"
        ))
        .into()
    })
}

pub fn initial_noise(backend: &dyn DiffusionBackend, seed: u64) -> Matrix {
    let latent = backend.descriptor().latent;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::gaussian(latent.pixels(), latent.channels, 1.0, &mut rng)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplingParams {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

pub fn render(
    backend: &dyn DiffusionBackend,
    prompt: &PromptSpec,
    tokens: &[&ExpandedTokenSet],
    params: SamplingParams,
) -> anyhow::Result<Image> {
    let n_pairs = tokens.first().map(|t| t.n_pairs()).unwrap_or(1);
    if tokens.iter().any(|t| t.n_pairs() != n_pairs) {
        return Err(UsageError("checkpoints disagree on n_pairs".into()).into());
    }
    let stages = StageSchedule::new(backend.descriptor().total_steps(), n_pairs)?;
    let options = SampleOptions {
        steps: params.steps,
        guidance: params.guidance,
        capture: false,
    };
    let noise = initial_noise(backend, params.seed);
    Ok(ddim_sample(backend, &noise, prompt, tokens, &stages, options)?.image)
}

#[derive(Debug, Serialize)]
pub struct SampleSidecar<'a> {
    pub prompt: &'a str,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub checkpoints: Vec<CheckpointRef>,
}

#[derive(Debug, Serialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl From<&LoadedCheckpoint> for CheckpointRef {
    fn from(c: &LoadedCheckpoint) -> Self {
        Self {
            path: c.path.clone(),
            sha256: c.sha256.clone(),
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
