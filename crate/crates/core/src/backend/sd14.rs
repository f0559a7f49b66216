//! Stable Diffusion 1.4 adapter contract.
//!
//! The adapter validates a diffusers-layout weights directory and exposes
//! the model's descriptor (dimensions, head count, noise schedule). Running
//! the CLIP encoder, UNet and VAE requires an external inference runtime that
//! is not part of this crate, so the forward methods return
//! [`SefiError::Unsupported`].

use std::path::{Path, PathBuf};

use super::{
    BackendDescriptor, CondVars, DiffusionBackend, LatentShape, NoiseSchedule, SpecialTokens,
};
use crate::attention_probe::AttentionProbe;
use crate::autodiff::{Graph, Var};
use crate::error::{Result, SefiError};
use crate::imaging::Image;
use crate::tensor::Matrix;

/// Entries that must exist under the weights directory.
pub const SD14_REQUIRED_ENTRIES: [&str; 5] =
    ["text_encoder", "tokenizer", "unet", "vae", "scheduler"];

#[derive(Debug, Clone)]
pub struct Sd14Adapter {
    weights_dir: PathBuf,
    descriptor: BackendDescriptor,
}

impl Sd14Adapter {
    /// Descriptor of the SD 1.4 model without touching any weights.
    pub fn reference_descriptor() -> BackendDescriptor {
        BackendDescriptor {
            name: "sd14-adapter".into(),
            d_text: 768,
            d_cond: 768,
            text_len: 77,
            latent: LatentShape {
                channels: 4,
                height: 64,
                width: 64,
            },
            heads: 8,
            cross_attention_layers: 16,
            image_size: 512,
            attention_map_size: 32,
            schedule: NoiseSchedule::scaled_linear(1000, 0.00085, 0.012)
                .expect("SD schedule is valid"),
        }
    }

    pub fn load(weights_dir: &Path) -> Result<Self> {
        if !weights_dir.is_dir() {
            return Err(SefiError::config(format!(
                "SD 1.4 weights directory {} does not exist",
                weights_dir.display()
            )));
        }
        let missing: Vec<&str> = SD14_REQUIRED_ENTRIES
            .iter()
            .copied()
            .filter(|e| !weights_dir.join(e).exists())
            .collect();
        if !missing.is_empty() {
            return Err(SefiError::config(format!(
                "SD 1.4 weights directory {} is missing: {}",
                weights_dir.display(),
                missing.join(", ")
            )));
        }
        Ok(Self {
            weights_dir: weights_dir.to_path_buf(),
            descriptor: Self::reference_descriptor(),
        })
    }

    pub fn weights_dir(&self) -> &Path {
        &self.weights_dir
    }

    fn unsupported<T>(&self, what: &str) -> Result<T> {
        Err(SefiError::Unsupported(format!(
            "{what} for weights at {} needs an external SD 1.4 runtime",
            self.weights_dir.display()
        )))
    }
}

impl DiffusionBackend for Sd14Adapter {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn special_tokens(&self) -> SpecialTokens {
        // CLIP BPE: <|startoftext|>, <|endoftext|> doubles as padding.
        SpecialTokens {
            start: 49406,
            end: 49407,
            pad: 49407,
            placeholder: 49407,
        }
    }

    fn tokenize_word(&self, _word: &str) -> Result<Vec<u32>> {
        self.unsupported("CLIP tokenization")
    }

    fn token_embeddings(&self, _ids: &[u32]) -> Result<Matrix> {
        self.unsupported("token embedding lookup")
    }

    fn encode_text_graph(&self, _g: &mut Graph, _embeddings: Var) -> Result<Var> {
        self.unsupported("text encoding")
    }

    fn predict_eps_graph(
        &self,
        _g: &mut Graph,
        _z_t: Var,
        _t: usize,
        _cond: CondVars,
        _probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        self.unsupported("UNet noise prediction")
    }

    fn attention_probs_graph(
        &self,
        _g: &mut Graph,
        _layer: usize,
        _queries: &[Matrix],
        _k_condition: Var,
    ) -> Result<Vec<Var>> {
        self.unsupported("cross-attention scoring")
    }

    fn vae_encode(&self, _image: &Image) -> Result<Matrix> {
        self.unsupported("VAE encoding")
    }

    fn vae_decode(&self, _latent: &Matrix) -> Result<Image> {
        self.unsupported("VAE decoding")
    }
}
