//! A tiny deterministic latent diffusion model.
//!
//! Word-level hashed vocabulary, a one-block causal text encoder, a
//! two-resolution denoiser with one softmax cross-attention layer per
//! resolution, and an orthogonal per-pixel VAE. All weights come from a
//! seeded generator and are rounded to `f32`.
//!
//! Both cross-attention layers read their queries from the condition-free
//! trunk, so the attention maps depend on the K-path condition only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendDescriptor, CondVars, DiffusionBackend, LatentShape, NoiseSchedule, SpecialTokens,
};
use crate::attention_probe::AttentionProbe;
use crate::autodiff::{Graph, Var};
use crate::error::{Result, SefiError};
use crate::imaging::Image;
use crate::tensor::Matrix;

const RESERVED_IDS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub d_text: usize,
    pub d_cond: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub latent_channels: usize,
    pub latent_side: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub total_steps: usize,
    pub attention_map_size: usize,
    /// Standard deviation of the denoiser output bias; a nonzero bias gives
    /// the token optimization something to correct.
    pub output_bias_std: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_text: 16,
            d_cond: 16,
            text_len: 16,
            vocab_size: 256,
            latent_channels: 4,
            latent_side: 8,
            heads: 2,
            head_dim: 8,
            model_dim: 16,
            total_steps: 1000,
            attention_map_size: 8,
            output_bias_std: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

#[derive(Debug, Clone)]
struct CrossAttention {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    descriptor: BackendDescriptor,
    token_embedding: Matrix,
    position_embedding: Matrix,
    encoder: Block,
    projection: Matrix,
    causal_mask: Matrix,
    w_in: Matrix,
    b_in: Matrix,
    w_time: Matrix,
    cross: [CrossAttention; 2],
    mlp_w1: Matrix,
    mlp_w2: Matrix,
    w_out: Matrix,
    b_out: Matrix,
    pool: Matrix,
    upsample: Matrix,
    vae_basis: Matrix,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Orthonormal `n x n` basis by Gram-Schmidt on Gaussian columns.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let raw = Matrix::gaussian(n, n, 1.0, rng);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| raw.get(i, j)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    let mut q = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            q.set(i, j, *v);
        }
    }
    q
}

fn timestep_features(t: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        row[i] = (t as f64 * freq).sin();
        row[i + half] = (t as f64 * freq).cos();
    }
    Matrix::row_vector(row)
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let c = &config;
        if c.d_text < 4 || c.d_cond == 0 || c.model_dim < 2 || c.heads == 0 || c.head_dim == 0 {
            return Err(SefiError::config(
                "toy backend dimensions must be positive (d_text >= 4)",
            ));
        }
        if c.text_len < 3 {
            return Err(SefiError::config(
                "toy text_len must hold start, end and one word",
            ));
        }
        if c.latent_side < 2 || !c.latent_side.is_multiple_of(2) {
            return Err(SefiError::config(
                "toy latent_side must be even and at least 2",
            ));
        }
        if c.latent_channels < 3 {
            return Err(SefiError::config(
                "toy VAE needs at least 3 latent channels",
            ));
        }
        if c.vocab_size <= RESERVED_IDS as usize || c.attention_map_size == 0 {
            return Err(SefiError::config(
                "toy vocab or attention map size too small",
            ));
        }
        if !(c.output_bias_std >= 0.0 && c.output_bias_std.is_finite()) {
            return Err(SefiError::config(
                "output_bias_std must be finite and non-negative",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let gauss = |r: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Matrix::gaussian(r, cols, 1.0 / (r as f64).sqrt(), rng)
        };
        let inner = c.heads * c.head_dim;
        let token_embedding = Matrix::gaussian(c.vocab_size, c.d_text, 0.5, &mut rng);
        let position_embedding = Matrix::gaussian(c.text_len, c.d_text, 0.1, &mut rng);
        let encoder = Block {
            wq: gauss(c.d_text, c.d_text, &mut rng),
            wk: gauss(c.d_text, c.d_text, &mut rng),
            wv: gauss(c.d_text, c.d_text, &mut rng),
            wo: gauss(c.d_text, c.d_text, &mut rng),
            w1: gauss(c.d_text, 2 * c.d_text, &mut rng),
            w2: gauss(2 * c.d_text, c.d_text, &mut rng),
        };
        let projection = gauss(c.d_text, c.d_cond, &mut rng);
        let mut causal_mask = Matrix::zeros(c.text_len, c.text_len);
        for i in 0..c.text_len {
            for j in i + 1..c.text_len {
                causal_mask.set(i, j, f64::NEG_INFINITY);
            }
        }
        let w_in = gauss(c.latent_channels, c.model_dim, &mut rng);
        let b_in = Matrix::gaussian(1, c.model_dim, 0.1, &mut rng);
        let w_time = gauss(c.model_dim, c.model_dim, &mut rng);
        let mut cross = || CrossAttention {
            wq: gauss(c.model_dim, inner, &mut rng),
            wk: gauss(c.d_cond, inner, &mut rng),
            wv: gauss(c.d_cond, inner, &mut rng),
            wo: gauss(inner, c.model_dim, &mut rng),
        };
        let cross = [cross(), cross()];
        let mlp_w1 = gauss(c.model_dim, 2 * c.model_dim, &mut rng);
        let mlp_w2 = gauss(2 * c.model_dim, c.model_dim, &mut rng);
        let w_out = gauss(c.model_dim, c.latent_channels, &mut rng);
        let b_out = if c.output_bias_std > 0.0 {
            Matrix::gaussian(1, c.latent_channels, c.output_bias_std, &mut rng)
        } else {
            Matrix::zeros(1, c.latent_channels)
        };
        let vae_basis = orthogonal(c.latent_channels, &mut rng);

        let side = c.latent_side;
        let half = side / 2;
        let mut pool = Matrix::zeros(half * half, side * side);
        let mut upsample = Matrix::zeros(side * side, half * half);
        for y in 0..side {
            for x in 0..side {
                let coarse = (y / 2) * half + x / 2;
                pool.set(coarse, y * side + x, 0.25);
                upsample.set(y * side + x, coarse, 1.0);
            }
        }
        let descriptor = BackendDescriptor {
            name: "toy".into(),
            d_text: c.d_text,
            d_cond: c.d_cond,
            text_len: c.text_len,
            latent: LatentShape {
                channels: c.latent_channels,
                height: side,
                width: side,
            },
            heads: c.heads,
            cross_attention_layers: 2,
            image_size: side,
            attention_map_size: c.attention_map_size,
            schedule: NoiseSchedule::cosine(c.total_steps)?,
        };
        Ok(Self {
            config,
            descriptor,
            token_embedding,
            position_embedding,
            encoder,
            projection,
            causal_mask,
            w_in,
            b_in,
            w_time,
            cross,
            mlp_w1,
            mlp_w2,
            w_out,
            b_out,
            pool,
            upsample,
            vae_basis,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// `W^k` of cross-attention layer `layer`, shape `(d_cond, heads * head_dim)`.
    pub fn cross_key_weights(&self, layer: usize) -> Option<&Matrix> {
        self.cross.get(layer).map(|c| &c.wk)
    }

    fn head_probs(&self, g: &mut Graph, queries: &[Var], k: Var) -> Vec<Var> {
        let dh = self.config.head_dim;
        let scale = 1.0 / (dh as f64).sqrt();
        queries
            .iter()
            .enumerate()
            .map(|(h, &q)| {
                let kh = g.slice_cols(k, h * dh, dh);
                let kt = g.transpose(kh);
                let s = g.matmul(q, kt);
                let s = g.scale(s, scale);
                g.softmax(s)
            })
            .collect()
    }

    fn cross_attention(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        cond: CondVars,
        probe: Option<&mut AttentionProbe>,
    ) -> Var {
        let w = &self.cross[layer];
        let dh = self.config.head_dim;
        let wq = g.constant(w.wq.clone());
        let wk = g.constant(w.wk.clone());
        let wv = g.constant(w.wv.clone());
        let wo = g.constant(w.wo.clone());
        let q = g.matmul(x, wq);
        let k = g.matmul(cond.k, wk);
        let v = g.matmul(cond.v, wv);
        let q_heads: Vec<Var> = (0..self.config.heads)
            .map(|h| g.slice_cols(q, h * dh, dh))
            .collect();
        let probs = self.head_probs(g, &q_heads, k);
        if let Some(probe) = probe {
            let queries = q_heads.iter().map(|&q| g.value(q).clone()).collect();
            probe.record(layer, probs.clone(), queries);
        }
        let outs: Vec<Var> = probs
            .iter()
            .enumerate()
            .map(|(h, &p)| {
                let vh = g.slice_cols(v, h * dh, dh);
                g.matmul(p, vh)
            })
            .collect();
        let merged = g.concat_cols(&outs);
        g.matmul(merged, wo)
    }

    fn check_condition(&self, g: &Graph, c: Var, label: &str) -> Result<()> {
        let want = (self.config.text_len, self.config.d_cond);
        if g.value(c).shape() != want {
            return Err(SefiError::input(format!(
                "{label} condition has shape {:?}, expected {want:?}",
                g.value(c).shape()
            )));
        }
        Ok(())
    }
}

impl DiffusionBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn special_tokens(&self) -> SpecialTokens {
        SpecialTokens {
            start: 0,
            end: 1,
            pad: 2,
            placeholder: 3,
        }
    }

    fn tokenize_word(&self, word: &str) -> Result<Vec<u32>> {
        let cleaned = word
            .trim_matches(|c: char| matches!(c, ',' | '.' | '!' | '?' | ';' | ':' | '"'))
            .to_lowercase();
        if cleaned.is_empty() {
            return Ok(Vec::new());
        }
        let span = self.config.vocab_size as u64 - u64::from(RESERVED_IDS);
        Ok(vec![RESERVED_IDS + (fnv1a(&cleaned) % span) as u32])
    }

    fn token_embeddings(&self, ids: &[u32]) -> Result<Matrix> {
        let d = self.config.d_text;
        let mut out = Matrix::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(SefiError::input(format!(
                    "token id {id} outside vocabulary"
                )));
            }
            out.row_mut(r)
                .copy_from_slice(self.token_embedding.row(id as usize));
        }
        Ok(out)
    }

    fn encode_text_graph(&self, g: &mut Graph, embeddings: Var) -> Result<Var> {
        let want = (self.config.text_len, self.config.d_text);
        if g.value(embeddings).shape() != want {
            return Err(SefiError::config(format!(
                "text embeddings have shape {:?}, expected {want:?}",
                g.value(embeddings).shape()
            )));
        }
        let b = &self.encoder;
        let pos = g.constant(self.position_embedding.clone());
        let x = g.add(embeddings, pos);

        let h = g.layer_norm(x);
        let wq = g.constant(b.wq.clone());
        let wk = g.constant(b.wk.clone());
        let wv = g.constant(b.wv.clone());
        let wo = g.constant(b.wo.clone());
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let kt = g.transpose(k);
        let s = g.matmul(q, kt);
        let s = g.scale(s, 1.0 / (self.config.d_text as f64).sqrt());
        let mask = g.constant(self.causal_mask.clone());
        let s = g.add(s, mask);
        let p = g.softmax(s);
        let a = g.matmul(p, v);
        let a = g.matmul(a, wo);
        let x = g.add(x, a);

        let h = g.layer_norm(x);
        let w1 = g.constant(b.w1.clone());
        let w2 = g.constant(b.w2.clone());
        let f = g.matmul(h, w1);
        let f = g.gelu(f);
        let f = g.matmul(f, w2);
        let x = g.add(x, f);

        let x = g.layer_norm(x);
        let proj = g.constant(self.projection.clone());
        Ok(g.matmul(x, proj))
    }

    fn predict_eps_graph(
        &self,
        g: &mut Graph,
        z_t: Var,
        t: usize,
        cond: CondVars,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Var> {
        self.descriptor.latent.check(g.value(z_t))?;
        if t >= self.descriptor.total_steps() {
            return Err(SefiError::input(format!(
                "timestep {t} outside [0, {})",
                self.descriptor.total_steps()
            )));
        }
        self.check_condition(g, cond.k, "K-path")?;
        self.check_condition(g, cond.v, "V-path")?;

        let temb = timestep_features(t, self.config.model_dim).matmul(&self.w_time);
        let w_in = g.constant(self.w_in.clone());
        let b_in = g.constant(self.b_in.add(&temb));
        let h = g.linear(z_t, w_in, b_in);

        // Both layers take queries from the condition-free trunk, so the
        // V-path condition never reaches an attention map.
        let n = g.layer_norm(h);
        let a0 = self.cross_attention(g, 0, n, cond, probe.as_deref_mut());

        let pool = g.constant(self.pool.clone());
        let p = g.matmul(pool, h);
        let n = g.layer_norm(p);
        let a1 = self.cross_attention(g, 1, n, cond, probe);
        let h = g.add(h, a0);
        let p = g.add(p, a1);
        let n = g.layer_norm(p);
        let w1 = g.constant(self.mlp_w1.clone());
        let w2 = g.constant(self.mlp_w2.clone());
        let m = g.matmul(n, w1);
        let m = g.gelu(m);
        let m = g.matmul(m, w2);
        let p = g.add(p, m);

        let up = g.constant(self.upsample.clone());
        let u = g.matmul(up, p);
        let h = g.add(h, u);

        let n = g.layer_norm(h);
        let w_out = g.constant(self.w_out.clone());
        let b_out = g.constant(self.b_out.clone());
        Ok(g.linear(n, w_out, b_out))
    }

    fn attention_probs_graph(
        &self,
        g: &mut Graph,
        layer: usize,
        queries: &[Matrix],
        k_condition: Var,
    ) -> Result<Vec<Var>> {
        if layer >= self.cross.len() {
            return Err(SefiError::input(format!(
                "no cross-attention layer {layer}"
            )));
        }
        if queries.len() != self.config.heads {
            return Err(SefiError::shape(format!(
                "{} query heads supplied, backend has {}",
                queries.len(),
                self.config.heads
            )));
        }
        self.check_condition(g, k_condition, "reference K-path")?;
        let wk = g.constant(self.cross[layer].wk.clone());
        let k = g.matmul(k_condition, wk);
        let q: Vec<Var> = queries.iter().map(|q| g.constant(q.clone())).collect();
        Ok(self.head_probs(g, &q, k))
    }

    fn vae_encode(&self, image: &Image) -> Result<Matrix> {
        let side = self.config.latent_side;
        if image.width() != side || image.height() != side {
            return Err(SefiError::input(format!(
                "toy VAE expects {side}x{side} images, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let c = self.config.latent_channels;
        let mut padded = Matrix::zeros(side * side, c);
        for (i, px) in image.data().chunks(3).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                padded.set(i, ch, 2.0 * v - 1.0);
            }
        }
        Ok(padded.matmul(&self.vae_basis))
    }

    fn vae_decode(&self, latent: &Matrix) -> Result<Image> {
        self.descriptor.latent.check(latent)?;
        let side = self.config.latent_side;
        let back = latent.matmul(&self.vae_basis.transpose());
        let mut data = Vec::with_capacity(side * side * 3);
        for i in 0..side * side {
            for ch in 0..3 {
                data.push((back.get(i, ch) + 1.0) / 2.0);
            }
        }
        Image::new(side, side, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> ToyBackend {
        ToyBackend::new(ToyConfig::default()).unwrap()
    }

    #[test]
    fn vae_basis_is_orthogonal() {
        let b = backend();
        let qtq = b.vae_basis.transpose().matmul(&b.vae_basis);
        assert!(qtq.max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    #[test]
    fn vae_rejects_wrong_size() {
        let b = backend();
        assert!(b.vae_encode(&Image::filled(4, 4, [0.5; 3])).is_err());
        assert!(b.vae_decode(&Matrix::zeros(64, 3)).is_err());
    }

    #[test]
    fn zero_image_encodes_finite() {
        let b = backend();
        assert!(b
            .vae_encode(&Image::filled(8, 8, [0.0; 3]))
            .unwrap()
            .is_finite());
    }

    #[test]
    fn tokenizer_normalizes_case_and_punctuation() {
        let b = backend();
        assert_eq!(
            b.tokenize_word("Person,").unwrap(),
            b.tokenize_word("person").unwrap()
        );
        assert!(b.tokenize_word("...").unwrap().is_empty());
        let id = b.tokenize_word("latte").unwrap()[0];
        assert!(id >= RESERVED_IDS && (id as usize) < 256);
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut ToyConfig)| {
            let mut c = ToyConfig::default();
            f(&mut c);
            ToyBackend::new(c).is_err()
        };
        assert!(bad(|c| c.latent_side = 7));
        assert!(bad(|c| c.d_text = 2));
        assert!(bad(|c| c.latent_channels = 2));
        assert!(bad(|c| c.text_len = 2));
    }

    #[test]
    fn different_seeds_give_different_weights() {
        let a = backend();
        let b = ToyBackend::new(ToyConfig {
            seed: 1,
            ..ToyConfig::default()
        })
        .unwrap();
        assert_ne!(a.token_embedding, b.token_embedding);
    }
}
