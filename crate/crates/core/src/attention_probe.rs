//! Cross-attention capture, Re2 canonicalization and the face-wise
//! attention loss.
//!
//! Raw maps are per-layer, per-head `(queries, text_len)` softmax matrices.
//! Re2 reshapes each layer's query axis to its square spatial grid, resizes
//! it bilinearly to `size x size` and averages over layers. In graph form a
//! canonical head is a `(size^2, text_len)` matrix; [`AttentionMapStack`]
//! stores the same numbers in `(heads, text_len, size, size)` order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backend::DiffusionBackend;
use crate::error::{Result, SefiError};
use crate::imaging::{resize_operator, save_gray_png};
use crate::tensor::Matrix;

/// Which text positions enter the attention loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum LossOption {
    /// #1: only the placeholder slot.
    SlotOnly,
    /// #2: positions `[0, prompt_len)`.
    PromptLength,
    /// #3: every position.
    #[default]
    Full,
}

impl TryFrom<u8> for LossOption {
    type Error = SefiError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::SlotOnly),
            2 => Ok(Self::PromptLength),
            3 => Ok(Self::Full),
            _ => Err(SefiError::config(format!(
                "loss option must be 1, 2 or 3, got {v}"
            ))),
        }
    }
}

impl From<LossOption> for u8 {
    fn from(o: LossOption) -> u8 {
        match o {
            LossOption::SlotOnly => 1,
            LossOption::PromptLength => 2,
            LossOption::Full => 3,
        }
    }
}

impl LossOption {
    /// Text positions selected by this option.
    pub fn columns(
        self,
        slot: usize,
        prompt_len: usize,
        text_len: usize,
    ) -> Result<(usize, usize)> {
        match self {
            LossOption::SlotOnly => {
                if slot >= text_len {
                    return Err(SefiError::input(format!(
                        "slot {slot} outside text length {text_len}"
                    )));
                }
                Ok((slot, 1))
            }
            LossOption::PromptLength => {
                if prompt_len == 0 || prompt_len > text_len {
                    return Err(SefiError::input(format!(
                        "prompt length {prompt_len} outside [1, {text_len}]"
                    )));
                }
                Ok((0, prompt_len))
            }
            LossOption::Full => Ok((0, text_len)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    Reference,
    Target,
}

/// One cross-attention layer as recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ProbedLayer {
    pub layer: usize,
    /// Per-head probabilities, gradient-carrying.
    pub probs: Vec<Var>,
    /// Per-head queries, detached copies.
    pub queries: Vec<Matrix>,
}

/// Recorder attached to exactly one denoiser forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionProbe {
    layers: Vec<ProbedLayer>,
}

impl AttentionProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: usize, probs: Vec<Var>, queries: Vec<Matrix>) {
        self.layers.push(ProbedLayer {
            layer,
            probs,
            queries,
        });
    }

    pub fn layers(&self) -> Result<&[ProbedLayer]> {
        if self.layers.is_empty() {
            return Err(SefiError::config(
                "attention probe captured no cross-attention layers",
            ));
        }
        Ok(&self.layers)
    }

    /// Value copies of every captured layer.
    pub fn raw_maps(&self, g: &Graph) -> Result<Vec<RawAttentionMap>> {
        Ok(self
            .layers()?
            .iter()
            .map(|l| RawAttentionMap {
                layer: l.layer,
                probs: l.probs.iter().map(|&p| g.value(p).clone()).collect(),
                queries: l.queries.clone(),
            })
            .collect())
    }

    /// Re2 of the captured (gradient-carrying) maps.
    pub fn canonical(&self, g: &mut Graph, size: usize) -> Result<CanonicalMaps> {
        let per_layer: Vec<Vec<Var>> = self.layers()?.iter().map(|l| l.probs.clone()).collect();
        re2_graph(g, &per_layer, size)
    }
}

/// Captured probabilities and queries of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAttentionMap {
    pub layer: usize,
    pub probs: Vec<Matrix>,
    pub queries: Vec<Matrix>,
}

impl RawAttentionMap {
    /// `(heads, queries, text_len)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (q, l) = self.probs.first().map(Matrix::shape).unwrap_or((0, 0));
        (self.probs.len(), q, l)
    }
}

/// Re2 output in graph form: one `(size^2, text_len)` node per head.
#[derive(Debug, Clone)]
pub struct CanonicalMaps {
    pub heads: Vec<Var>,
    pub size: usize,
    pub layer_count: usize,
}

/// Canonical attention maps laid out as `(heads, text_len, size, size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapStack {
    pub heads: usize,
    pub text_len: usize,
    pub size: usize,
    pub layer_count: usize,
    pub source: MapSource,
    data: Vec<f64>,
}

impl AttentionMapStack {
    pub fn from_data(
        heads: usize,
        text_len: usize,
        size: usize,
        source: MapSource,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != heads * text_len * size * size {
            return Err(SefiError::shape(format!(
                "{} values do not fill a ({heads}, {text_len}, {size}, {size}) stack",
                data.len()
            )));
        }
        Ok(Self {
            heads,
            text_len,
            size,
            layer_count: 1,
            source,
            data,
        })
    }

    pub fn from_canonical(g: &Graph, maps: &CanonicalMaps, source: MapSource) -> Self {
        let size = maps.size;
        let text_len = g.value(maps.heads[0]).cols();
        let mut data = Vec::with_capacity(maps.heads.len() * text_len * size * size);
        for &h in &maps.heads {
            let m = g.value(h);
            for l in 0..text_len {
                for pix in 0..size * size {
                    data.push(m.get(pix, l));
                }
            }
        }
        Self {
            heads: maps.heads.len(),
            text_len,
            size,
            layer_count: maps.layer_count,
            source,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.heads, self.text_len, self.size, self.size)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, h: usize, l: usize, y: usize, x: usize) -> f64 {
        self.data[((h * self.text_len + l) * self.size + y) * self.size + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Head-averaged `size x size` map of text position `l`.
    pub fn token_map(&self, l: usize) -> Vec<f64> {
        let s2 = self.size * self.size;
        let mut out = vec![0.0; s2];
        for h in 0..self.heads {
            let start = (h * self.text_len + l) * s2;
            for (o, v) in out.iter_mut().zip(&self.data[start..start + s2]) {
                *o += v / self.heads as f64;
            }
        }
        out
    }
}

fn grid_side(n_queries: usize) -> Result<usize> {
    let side = (n_queries as f64).sqrt().round() as usize;
    if side * side != n_queries || side == 0 {
        return Err(SefiError::shape(format!(
            "{n_queries} queries do not form a square spatial map"
        )));
    }
    Ok(side)
}

/// Re2 on graph nodes: `layers[i][h]` is head `h` of layer `i`.
pub fn re2_graph(g: &mut Graph, layers: &[Vec<Var>], size: usize) -> Result<CanonicalMaps> {
    let Some(first) = layers.first() else {
        return Err(SefiError::config("re2 needs at least one layer"));
    };
    let heads = first.len();
    let text_len = g.value(first[0]).cols();
    let mut sums: Vec<Option<Var>> = vec![None; heads];
    for layer in layers {
        if layer.len() != heads {
            return Err(SefiError::shape("layers disagree on head count"));
        }
        let n_queries = g.value(layer[0]).rows();
        let side = grid_side(n_queries)?;
        let resize = g.constant(resize_operator(side, size));
        for (h, &p) in layer.iter().enumerate() {
            if g.value(p).shape() != (n_queries, text_len) {
                return Err(SefiError::shape("heads of a layer disagree in shape"));
            }
            let r = if side == size { p } else { g.matmul(resize, p) };
            sums[h] = Some(match sums[h] {
                Some(acc) => g.add(acc, r),
                None => r,
            });
        }
    }
    let n = layers.len();
    let heads = sums
        .into_iter()
        .map(|s| {
            let s = s.expect("every head receives at least one layer");
            if n == 1 {
                s
            } else {
                g.scale(s, 1.0 / n as f64)
            }
        })
        .collect();
    Ok(CanonicalMaps {
        heads,
        size,
        layer_count: n,
    })
}

pub fn re2(raw: &[RawAttentionMap], size: usize) -> Result<AttentionMapStack> {
    let mut g = Graph::new();
    let layers: Vec<Vec<Var>> = raw
        .iter()
        .map(|l| l.probs.iter().map(|p| g.constant(p.clone())).collect())
        .collect();
    let maps = re2_graph(&mut g, &layers, size)?;
    Ok(AttentionMapStack::from_canonical(
        &g,
        &maps,
        MapSource::Target,
    ))
}

/// Mean squared difference between `a_r` and `a_t` over the text positions
/// selected by `option`.
pub fn attention_loss(
    a_r: &AttentionMapStack,
    a_t: &AttentionMapStack,
    option: LossOption,
    slot_index: usize,
    prompt_len: usize,
) -> Result<f64> {
    if a_r.shape() != a_t.shape() {
        return Err(SefiError::input(format!(
            "reference stack {:?} and target stack {:?} differ",
            a_r.shape(),
            a_t.shape()
        )));
    }
    let (start, count) = option.columns(slot_index, prompt_len, a_r.text_len)?;
    let s2 = a_r.size * a_r.size;
    let mut total = 0.0;
    for h in 0..a_r.heads {
        let lo = (h * a_r.text_len + start) * s2;
        let hi = lo + count * s2;
        total += a_r.data[lo..hi]
            .iter()
            .zip(&a_t.data[lo..hi])
            .map(|(r, t)| (r - t) * (r - t))
            .sum::<f64>();
    }
    Ok(total / (a_r.heads * count * s2) as f64)
}

/// Graph form of [`attention_loss`]; gradients reach `a_t` only when
/// `a_r` was built from detached nodes.
pub fn attention_loss_graph(
    g: &mut Graph,
    a_r: &CanonicalMaps,
    a_t: &CanonicalMaps,
    option: LossOption,
    slot_index: usize,
    prompt_len: usize,
) -> Result<Var> {
    if a_r.heads.len() != a_t.heads.len() || a_r.size != a_t.size {
        return Err(SefiError::input(
            "reference and target maps differ in shape",
        ));
    }
    let text_len = g.value(a_t.heads[0]).cols();
    let (start, count) = option.columns(slot_index, prompt_len, text_len)?;
    let mut total: Option<Var> = None;
    for (&r, &t) in a_r.heads.iter().zip(&a_t.heads) {
        if g.value(r).shape() != g.value(t).shape() {
            return Err(SefiError::input(
                "reference and target heads differ in shape",
            ));
        }
        let (r, t) = if count == text_len {
            (r, t)
        } else {
            (g.slice_cols(r, start, count), g.slice_cols(t, start, count))
        };
        let d = g.sub(r, t);
        let sq = g.square(d);
        let s = g.sum(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    let n = a_t.heads.len() * count * a_t.size * a_t.size;
    Ok(g.scale(total.expect("at least one head"), 1.0 / n as f64))
}

/// Reference maps: the captured queries scored against the reference K-path
/// condition, canonicalized and detached.
pub fn reference_maps_graph(
    g: &mut Graph,
    backend: &dyn DiffusionBackend,
    probe: &AttentionProbe,
    reference_k: Var,
    size: usize,
) -> Result<CanonicalMaps> {
    let layers = probe.layers().map_err(|_| {
        SefiError::Sequencing("reference maps need queries captured from a target pass".into())
    })?;
    let mut per_layer = Vec::with_capacity(layers.len());
    for l in layers {
        let probs = backend.attention_probs_graph(g, l.layer, &l.queries, reference_k)?;
        per_layer.push(probs.into_iter().map(|p| g.detach(p)).collect());
    }
    re2_graph(g, &per_layer, size)
}

pub fn reference_maps(
    captured: &[RawAttentionMap],
    reference_k: &Matrix,
    backend: &dyn DiffusionBackend,
    size: usize,
) -> Result<AttentionMapStack> {
    if captured.is_empty() {
        return Err(SefiError::Sequencing(
            "reference maps need queries captured from a target pass".into(),
        ));
    }
    let mut g = Graph::new();
    let k = g.constant(reference_k.clone());
    let mut per_layer = Vec::with_capacity(captured.len());
    for l in captured {
        per_layer.push(backend.attention_probs_graph(&mut g, l.layer, &l.queries, k)?);
    }
    let maps = re2_graph(&mut g, &per_layer, size)?;
    Ok(AttentionMapStack::from_canonical(
        &g,
        &maps,
        MapSource::Reference,
    ))
}

/// Writes one 8-bit grayscale PNG per text position,
/// `attn_t{timestep}_tok{index}.png`, head-averaged and scaled so the
/// stack's maximum maps to 255.
pub fn write_heatmaps(
    stack: &AttentionMapStack,
    dir: &Path,
    timestep: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let max = stack.max();
    let mut paths = Vec::with_capacity(stack.text_len);
    for l in 0..stack.text_len {
        let pixels: Vec<u8> = stack
            .token_map(l)
            .iter()
            .map(|&v| {
                if max > 0.0 {
                    (v / max * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        let path = dir.join(format!("attn_t{timestep}_tok{l}.png"));
        save_gray_png(&path, stack.size, &pixels)?;
        paths.push(path);
    }
    Ok(paths)
}
