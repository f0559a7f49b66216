//! Expansion of one frozen initializer token into per-stage K/V token pairs.
//!
//! The initializer vector is broadcast to `2 * n_pairs` positions, a learned
//! offset is added to each position, and the sequence passes through two
//! single-head self-attention blocks and one feed-forward block (pre-norm,
//! residual). The first `n_pairs` outputs are the K-path tokens, the rest the
//! V-path tokens. Only [`ExpanderParams`] are trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Result, SefiError};
use crate::tensor::Matrix;

pub const DEFAULT_N_PAIRS: usize = 5;
pub const DEFAULT_INITIALIZER_WORD: &str = "person";
const INIT_STD: f64 = 0.02;
const FFN_EXPANSION: usize = 4;

/// The frozen embedding of the initializer word.
#[derive(Debug, Clone, PartialEq)]
pub struct IdToken {
    pub vector: Vec<f64>,
    pub source_word: String,
}

impl IdToken {
    pub fn new(vector: Vec<f64>, source_word: impl Into<String>) -> Self {
        Self {
            vector,
            source_word: source_word.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.vector.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionWeights {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
}

impl SelfAttentionWeights {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = || Matrix::gaussian(d, d, INIT_STD, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let b = || Matrix::zeros(1, d);
        Self {
            wq,
            bq: b(),
            wk,
            bk: b(),
            wv,
            bv: b(),
            wo,
            bo: b(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Trainable weights of the expander.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpanderParams {
    pub seed_offsets: Matrix,
    pub attention: [SelfAttentionWeights; 2],
    pub ffn: FeedForwardWeights,
}

/// Tensor names and shapes of an expander, in checkpoint order.
pub fn parameter_layout(d_text: usize, n_pairs: usize) -> Vec<(String, (usize, usize))> {
    let d = d_text;
    let h = FFN_EXPANSION * d;
    let mut layout = vec![("seed_offsets".to_string(), (2 * n_pairs, d))];
    for layer in 0..2 {
        for (name, shape) in [
            ("wq", (d, d)),
            ("bq", (1, d)),
            ("wk", (d, d)),
            ("bk", (1, d)),
            ("wv", (d, d)),
            ("bv", (1, d)),
            ("wo", (d, d)),
            ("bo", (1, d)),
        ] {
            layout.push((format!("attn{layer}.{name}"), shape));
        }
    }
    for (name, shape) in [
        ("w1", (d, h)),
        ("b1", (1, h)),
        ("w2", (h, d)),
        ("b2", (1, d)),
    ] {
        layout.push((format!("ffn.{name}"), shape));
    }
    layout
}

impl ExpanderParams {
    pub fn d_text(&self) -> usize {
        self.seed_offsets.cols()
    }

    pub fn n_pairs(&self) -> usize {
        self.seed_offsets.rows() / 2
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All tensors in [`parameter_layout`] order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.seed_offsets];
        for a in &self.attention {
            out.extend([&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo]);
        }
        out.extend([&self.ffn.w1, &self.ffn.b1, &self.ffn.w2, &self.ffn.b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.seed_offsets];
        for a in &mut self.attention {
            out.extend([
                &mut a.wq, &mut a.bq, &mut a.wk, &mut a.bk, &mut a.wv, &mut a.bv, &mut a.wo,
                &mut a.bo,
            ]);
        }
        let f = &mut self.ffn;
        out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
        out
    }

    /// Rebuilds parameters from tensors in [`parameter_layout`] order.
    pub fn from_tensors(d_text: usize, n_pairs: usize, tensors: Vec<Matrix>) -> Result<Self> {
        let layout = parameter_layout(d_text, n_pairs);
        if tensors.len() != layout.len() {
            return Err(SefiError::shape(format!(
                "expected {} expander tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != *shape {
                return Err(SefiError::shape(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let seed_offsets = next();
        let mut attn = || SelfAttentionWeights {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
        };
        let attention = [attn(), attn()];
        let ffn = FeedForwardWeights {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        Ok(Self {
            seed_offsets,
            attention,
            ffn,
        })
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn register(&self, g: &mut Graph) -> ExpanderVars {
        ExpanderVars {
            vars: self
                .tensors()
                .into_iter()
                .map(|t| g.param(t.clone()))
                .collect(),
            n_pairs: self.n_pairs(),
        }
    }
}

/// Graph handles for a registered [`ExpanderParams`].
#[derive(Debug, Clone)]
pub struct ExpanderVars {
    vars: Vec<Var>,
    n_pairs: usize,
}

impl ExpanderVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every tensor in layout order; zeros where the root does
    /// not depend on a tensor.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> Vec<Matrix> {
        self.vars
            .iter()
            .map(|&v| {
                grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = g.value(v).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect()
    }
}

pub fn init_expander(d_text: usize, n_pairs: usize, rng_seed: u64) -> Result<ExpanderParams> {
    if d_text < 4 {
        return Err(SefiError::config(format!(
            "d_text must be at least 4, got {d_text}"
        )));
    }
    if n_pairs == 0 {
        return Err(SefiError::config("n_pairs must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seed_offsets = Matrix::gaussian(2 * n_pairs, d_text, INIT_STD, &mut rng);
    let attention = [
        SelfAttentionWeights::init(d_text, &mut rng),
        SelfAttentionWeights::init(d_text, &mut rng),
    ];
    let hidden = FFN_EXPANSION * d_text;
    let ffn = FeedForwardWeights {
        w1: Matrix::gaussian(d_text, hidden, INIT_STD, &mut rng),
        b1: Matrix::zeros(1, hidden),
        w2: Matrix::gaussian(hidden, d_text, INIT_STD, &mut rng),
        b2: Matrix::zeros(1, d_text),
    };
    Ok(ExpanderParams {
        seed_offsets,
        attention,
        ffn,
    })
}

/// The learned per-stage tokens: row `i` of `k_tokens` / `v_tokens` is pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedTokenSet {
    pub k_tokens: Matrix,
    pub v_tokens: Matrix,
}

impl ExpandedTokenSet {
    pub fn new(k_tokens: Matrix, v_tokens: Matrix) -> Result<Self> {
        if k_tokens.shape() != v_tokens.shape() || k_tokens.rows() == 0 {
            return Err(SefiError::shape(format!(
                "K tokens {:?} and V tokens {:?} must share a non-empty shape",
                k_tokens.shape(),
                v_tokens.shape()
            )));
        }
        if !k_tokens.is_finite() || !v_tokens.is_finite() {
            return Err(SefiError::input("token set contains non-finite values"));
        }
        Ok(Self { k_tokens, v_tokens })
    }

    /// Every slot holds the same vector.
    pub fn uniform(vector: &[f64], n_pairs: usize) -> Self {
        let mut k = Matrix::zeros(n_pairs, vector.len());
        for r in 0..n_pairs {
            k.row_mut(r).copy_from_slice(vector);
        }
        Self {
            v_tokens: k.clone(),
            k_tokens: k,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.k_tokens.rows()
    }

    pub fn d_text(&self) -> usize {
        self.k_tokens.cols()
    }

    pub fn k_token(&self, pair: usize) -> &[f64] {
        self.k_tokens.row(pair)
    }

    pub fn v_token(&self, pair: usize) -> &[f64] {
        self.v_tokens.row(pair)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.k_tokens.bit_eq(&other.k_tokens) && self.v_tokens.bit_eq(&other.v_tokens)
    }
}

fn self_attention(g: &mut Graph, x: Var, w: &[Var]) -> Var {
    let [wq, bq, wk, bk, wv, bv, wo, bo] = w else {
        unreachable!("self-attention takes eight tensors")
    };
    let d = g.value(x).cols();
    let q = g.linear(x, *wq, *bq);
    let k = g.linear(x, *wk, *bk);
    let v = g.linear(x, *wv, *bv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.softmax(scores);
    let mixed = g.matmul(probs, v);
    g.linear(mixed, *wo, *bo)
}

/// Differentiable expansion; returns the `2 * n_pairs x d_text` output
/// sequence (K tokens first).
pub fn expand_graph(g: &mut Graph, params: &ExpanderVars, id_token: Var) -> Var {
    let v = params.vars();
    let n = 2 * params.n_pairs;
    let base = g.broadcast_rows(id_token, n);
    let mut x = g.add(base, v[0]);
    for layer in 0..2 {
        let w = &v[1 + 8 * layer..1 + 8 * (layer + 1)];
        let normed = g.layer_norm(x);
        let attn = self_attention(g, normed, w);
        x = g.add(x, attn);
    }
    let normed = g.layer_norm(x);
    let hidden = g.linear(normed, v[17], v[18]);
    let hidden = g.gelu(hidden);
    let out = g.linear(hidden, v[19], v[20]);
    g.add(x, out)
}

pub fn expand(params: &ExpanderParams, id_token: &IdToken) -> Result<ExpandedTokenSet> {
    if id_token.dim() != params.d_text() {
        return Err(SefiError::config(format!(
            "initializer token has dimension {}, expander expects {}",
            id_token.dim(),
            params.d_text()
        )));
    }
    let mut g = Graph::new();
    let vars = ExpanderVars {
        vars: params
            .tensors()
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect(),
        n_pairs: params.n_pairs(),
    };
    let id = g.constant(id_token.as_row());
    let out = expand_graph(&mut g, &vars, id);
    split_tokens(g.value(out), params.n_pairs())
}

pub(crate) fn split_tokens(sequence: &Matrix, n_pairs: usize) -> Result<ExpandedTokenSet> {
    ExpandedTokenSet::new(
        sequence.slice_rows(0, n_pairs),
        sequence.slice_rows(n_pairs, n_pairs),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn token(d: usize, seed: u64) -> IdToken {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IdToken::new(
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            "person",
        )
    }

    #[test]
    fn init_shapes_and_errors() {
        let p = init_expander(16, 5, 0).unwrap();
        assert_eq!(p.seed_offsets.shape(), (10, 16));
        assert_eq!(p.attention[1].wo.shape(), (16, 16));
        assert_eq!(p.ffn.w1.shape(), (16, 64));
        assert!(init_expander(0, 5, 0).is_err());
        assert!(init_expander(3, 5, 0).is_err());
        assert!(init_expander(16, 0, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_expander(32, 5, 7).unwrap();
        let b = init_expander(32, 5, 7).unwrap();
        assert!(a
            .tensors()
            .iter()
            .zip(b.tensors())
            .all(|(x, y)| x.bit_eq(y)));
        let c = init_expander(32, 5, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_statistics_and_zero_biases() {
        let p = init_expander(64, 5, 3).unwrap();
        let w = p.attention[0].wq.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((std - 0.02).abs() < 0.002, "std {std}");
        assert!(p.attention[0].bq.data().iter().all(|&v| v == 0.0));
        assert!(p.ffn.b1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn count_matches_layout() {
        let p = init_expander(16, 5, 0).unwrap();
        let by_layout: usize = parameter_layout(16, 5)
            .iter()
            .map(|(_, (r, c))| r * c)
            .sum();
        assert_eq!(p.count(), by_layout);
        assert_eq!(p.count(), 4464);
    }

    #[test]
    fn zero_offsets_give_identical_outputs() {
        let mut p = init_expander(16, 5, 1).unwrap();
        p.seed_offsets = Matrix::zeros(10, 16);
        let set = expand(&p, &token(16, 2)).unwrap();
        for i in 0..5 {
            assert_eq!(set.k_token(i), set.k_token(0));
            assert_eq!(set.v_token(i), set.k_token(0));
        }
    }

    #[test]
    fn zero_weights_reduce_to_token_plus_offset() {
        let mut p = init_expander(8, 2, 1).unwrap();
        for t in p.tensors_mut().into_iter().skip(1) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let id = token(8, 4);
        let set = expand(&p, &id).unwrap();
        for i in 0..2 {
            for j in 0..8 {
                let want = id.vector[j] + p.seed_offsets.get(i, j);
                assert!((set.k_tokens.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let p = init_expander(16, 5, 0).unwrap();
        assert!(matches!(
            expand(&p, &token(8, 0)),
            Err(SefiError::Config(_))
        ));
    }

    #[test]
    fn permuting_offsets_permutes_outputs() {
        let p = init_expander(16, 3, 9).unwrap();
        let id = token(16, 1);
        let base = expand(&p, &id).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let mut q = p.clone();
        for (dst, &src) in perm.iter().enumerate() {
            q.seed_offsets
                .row_mut(dst)
                .copy_from_slice(p.seed_offsets.row(src));
        }
        let permuted = expand(&q, &id).unwrap();
        let row = |s: &ExpandedTokenSet, i: usize| -> Vec<f64> {
            if i < 3 {
                s.k_token(i).to_vec()
            } else {
                s.v_token(i - 3).to_vec()
            }
        };
        for (dst, &src) in perm.iter().enumerate() {
            let a = row(&permuted, dst);
            let b = row(&base, src);
            let err = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "row {dst} differs by {err}");
        }
    }

    #[test]
    fn expand_gradient_matches_finite_differences() {
        let p = init_expander(16, 5, 11).unwrap();
        let id = token(16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let head = Matrix::gaussian(10, 16, 1.0, &mut rng);
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let idv = g.constant(id.as_row());
        let out = expand_graph(&mut g, &vars, idv);
        let h = g.constant(head.clone());
        let prod = g.mul(out, h);
        let sq = g.square(prod);
        let root = g.sum(sq);
        let grads = vars.gradients(&g, &g.backward(root));
        let quad = |params: &ExpanderParams| -> f64 {
            let set = expand(params, &id).unwrap();
            let mut total = 0.0;
            for i in 0..5 {
                for j in 0..16 {
                    total += (set.k_tokens.get(i, j) * head.get(i, j)).powi(2);
                    total += (set.v_tokens.get(i, j) * head.get(i + 5, j)).powi(2);
                }
            }
            total
        };
        let mut sampler = ChaCha8Rng::seed_from_u64(14);
        let step = 1e-3;
        let n_tensors = p.tensors().len();
        for _ in 0..25 {
            let ti = sampler.random_range(0..n_tensors);
            let len = p.tensors()[ti].len();
            let ei = sampler.random_range(0..len);
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data_mut()[ei] += step;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data_mut()[ei] -= step;
            let numeric = (quad(&plus) - quad(&minus)) / (2.0 * step);
            let analytic = grads[ti].data()[ei];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "tensor {ti} entry {ei}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn id_token_receives_no_parameter_slot() {
        let p = init_expander(16, 5, 0).unwrap();
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        let id = g.constant(token(16, 0).as_row());
        let out = expand_graph(&mut g, &vars, id);
        let s = g.square(out);
        let root = g.sum(s);
        let grads = g.backward(root);
        assert!(grads.get(id).is_none());
        assert!(vars.vars().iter().all(|&v| grads.get(v).is_some()));
    }
}
