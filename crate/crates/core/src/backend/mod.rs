//! Diffusion backends: text encoder, split-condition denoiser, VAE and noise
//! schedule behind one trait.
//!
//! Latents are `(pixels, channels)` matrices with pixels in row-major order.
//! Every cross-attention layer of a denoiser derives its keys from the
//! K-path condition and its values from the V-path condition.

mod ddim;
mod schedule;
mod sd14;
mod toy;

pub use ddim::{
    ddim_loop, ddim_sample, ddim_step, guided_eps, DdimRun, GuidanceBranch, SampleOptions,
    SampleOutput, StepCapture,
};
pub use schedule::NoiseSchedule;
pub use sd14::{Sd14Adapter, SD14_REQUIRED_ENTRIES};
pub use toy::{ToyBackend, ToyConfig};

use serde::{Deserialize, Serialize};

use crate::attention_probe::{AttentionProbe, RawAttentionMap};
use crate::autodiff::{Graph, Var};
use crate::conditioning::ConditionPair;
use crate::error::{Result, SefiError};
use crate::imaging::Image;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.pixels() * self.channels
    }

    pub fn zeros(&self) -> Matrix {
        Matrix::zeros(self.pixels(), self.channels)
    }

    pub fn check(&self, latent: &Matrix) -> Result<()> {
        if latent.shape() != (self.pixels(), self.channels) {
            return Err(SefiError::input(format!(
                "latent has shape {:?}, expected ({}, {})",
                latent.shape(),
                self.pixels(),
                self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub d_text: usize,
    pub d_cond: usize,
    /// Token sequence length including start, end and padding tokens.
    pub text_len: usize,
    pub latent: LatentShape,
    pub heads: usize,
    pub cross_attention_layers: usize,
    /// Side of the square RGB images consumed by the VAE.
    pub image_size: usize,
    /// Side of the canonical attention maps produced by Re2.
    pub attention_map_size: usize,
    pub schedule: NoiseSchedule,
}

impl BackendDescriptor {
    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps()
    }
}

/// Special token ids of a backend's tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub start: u32,
    pub end: u32,
    pub pad: u32,
    /// Id written at placeholder slots; its embedding row is always replaced.
    pub placeholder: u32,
}

/// K-path and V-path condition nodes for one denoiser pass.
#[derive(Debug, Clone, Copy)]
pub struct CondVars {
    pub k: Var,
    pub v: Var,
}

impl CondVars {
    /// A standard single-condition pass: keys and values from the same tensor.
    pub fn shared(c: Var) -> Self {
        Self { k: c, v: c }
    }
}

pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn special_tokens(&self) -> SpecialTokens;

    /// Token ids of one whitespace-delimited word.
    fn tokenize_word(&self, word: &str) -> Result<Vec<u32>>;

    /// Input embedding rows for `ids`, shape `(ids.len(), d_text)`.
    fn token_embeddings(&self, ids: &[u32]) -> Result<Matrix>;

    /// Frozen text encoder: `(text_len, d_text)` embeddings to a
    /// `(text_len, d_cond)` condition.
    fn encode_text_graph(&self, g: &mut Graph, embeddings: Var) -> Result<Var>;

    /// Noise prediction for latent `z_t` at timestep `t`. When a probe is
    /// given, every cross-attention layer records its probabilities and
    /// queries into it.
    fn predict_eps_graph(
        &self,
        g: &mut Graph,
        z_t: Var,
        t: usize,
        cond: CondVars,
        probe: Option<&mut AttentionProbe>,
    ) -> Result<Var>;

    /// Per-head attention probabilities of cross-attention layer `layer`
    /// given per-head queries and a K-path condition.
    fn attention_probs_graph(
        &self,
        g: &mut Graph,
        layer: usize,
        queries: &[Matrix],
        k_condition: Var,
    ) -> Result<Vec<Var>>;

    fn vae_encode(&self, image: &Image) -> Result<Matrix>;

    fn vae_decode(&self, latent: &Matrix) -> Result<Image>;

    fn add_noise(&self, z0: &Matrix, t: usize, noise: &Matrix) -> Result<Matrix> {
        self.descriptor().latent.check(z0)?;
        self.descriptor().schedule.add_noise(z0, t, noise)
    }
}

pub fn encode_text(backend: &dyn DiffusionBackend, embeddings: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let out = backend.encode_text_graph(&mut g, e)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone)]
pub struct NoisePrediction {
    pub eps: Matrix,
    pub captured_maps: Option<Vec<RawAttentionMap>>,
}

pub fn predict_eps(
    backend: &dyn DiffusionBackend,
    z_t: &Matrix,
    t: usize,
    cond: &ConditionPair,
    capture: bool,
) -> Result<NoisePrediction> {
    let mut g = Graph::new();
    let z = g.constant(z_t.clone());
    let k = g.constant(cond.k_condition.clone());
    let v = g.constant(cond.v_condition.clone());
    let mut probe = capture.then(AttentionProbe::new);
    let eps = backend.predict_eps_graph(&mut g, z, t, CondVars { k, v }, probe.as_mut())?;
    let captured_maps = probe.map(|p| p.raw_maps(&g)).transpose()?;
    Ok(NoisePrediction {
        eps: g.value(eps).clone(),
        captured_maps,
    })
}

/// Single-condition pass (`K` and `V` from the same tensor).
pub fn predict_eps_single(
    backend: &dyn DiffusionBackend,
    z_t: &Matrix,
    t: usize,
    condition: &Matrix,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let z = g.constant(z_t.clone());
    let c = g.constant(condition.clone());
    let eps = backend.predict_eps_graph(&mut g, z, t, CondVars::shared(c), None)?;
    Ok(g.value(eps).clone())
}
