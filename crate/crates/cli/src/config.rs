//! `RunConfig` JSON document. Every section and field is optional; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use sefi_core::attention_probe::LossOption;
use sefi_core::backend::{DiffusionBackend, Sd14Adapter, ToyBackend, ToyConfig};
use sefi_core::conditioning::TokenOrder;
use sefi_core::evaluator::DEFAULT_THRESHOLD;
use sefi_core::trainer::TrainConfig;

use crate::UsageError;

pub const WEIGHTS_ENV: &str = "SEFI_WEIGHTS_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Toy,
    #[serde(rename = "sd14-adapter")]
    #[value(name = "sd14-adapter")]
    Sd14Adapter,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// SD 1.4 weights directory; `SEFI_WEIGHTS_DIR` is used when absent.
    pub weights_dir: Option<PathBuf>,
    pub toy: ToyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub prompt: Option<String>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            seed: 0,
            prompt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblateMode {
    #[default]
    Add,
    Substitute,
    TrainGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub mode: AblateMode,
    /// Token counts for add / substitute; defaults to `0..=2 * n_pairs`.
    pub counts: Option<Vec<usize>>,
    pub order: TokenOrder,
    /// Loss options trained in `train-grid` mode.
    pub loss_options: Vec<LossOption>,
    /// Token pair counts trained in `train-grid` mode.
    pub n_pairs: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            mode: AblateMode::Add,
            counts: None,
            order: TokenOrder::StageMajor,
            loss_options: vec![
                LossOption::SlotOnly,
                LossOption::PromptLength,
                LossOption::Full,
            ],
            n_pairs: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    #[default]
    Stub,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub manifest: Option<PathBuf>,
    pub threshold: f64,
    pub scorer: ScorerKind,
    /// Precomputed score table for the `table` scorer.
    pub scores: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            manifest: None,
            threshold: DEFAULT_THRESHOLD,
            scorer: ScorerKind::Stub,
            scores: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub ablate: AblateSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn build_backend(&self) -> anyhow::Result<Box<dyn DiffusionBackend>> {
        Ok(match self.backend.kind {
            BackendKind::Toy => Box::new(ToyBackend::new(self.backend.toy.clone())?),
            BackendKind::Sd14Adapter => {
                let dir = self
                    .backend
                    .weights_dir
                    .clone()
                    .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        UsageError(format!(
                            "sd14-adapter needs backend.weights_dir or {WEIGHTS_ENV}"
                        ))
                    })?;
                Box::new(Sd14Adapter::load(&dir)?)
            }
        })
    }
}
