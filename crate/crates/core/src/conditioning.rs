//! Prompt tokenization with identity placeholders, slot splicing into the
//! text encoder input, per-stage K/V condition pairs, and the progressive
//! add / substitute token schedules.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backend::{CondVars, DiffusionBackend};
use crate::error::{Result, SefiError};
use crate::tensor::Matrix;
use crate::token_expander::ExpandedTokenSet;

/// Training prompt templates; `V*` marks the identity slot.
pub const TRAINING_TEMPLATES: [&str; 7] = [
    "a photo of a face of V*",
    "a photo of a rendering of a face of V*",
    "a close-up photo of the face of V*",
    "a photo of the cool face of V*",
    "a rendition of the face of V*",
    "an illustration of a face of V*",
    "a depiction of a face of V*",
];

/// A tokenized prompt of exactly `text_len` ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub template: String,
    pub token_ids: Vec<u32>,
    /// Slot index of each identity's placeholder, in identity order.
    pub placeholder_positions: Vec<usize>,
    /// Number of non-padding tokens (start and end included).
    pub prompt_len: usize,
}

impl PromptSpec {
    pub fn identities(&self) -> usize {
        self.placeholder_positions.len()
    }

    /// The same prompt with every placeholder slot holding `word`'s id, as if
    /// the word had been typed in place of the placeholder.
    pub fn with_word(&self, word: &str, backend: &dyn DiffusionBackend) -> Result<PromptSpec> {
        let ids = backend.tokenize_word(word)?;
        let [id] = ids[..] else {
            return Err(SefiError::prompt(format!(
                "'{word}' is {} tokens; slot substitution needs exactly one",
                ids.len()
            )));
        };
        let mut out = self.clone();
        for &p in &self.placeholder_positions {
            out.token_ids[p] = id;
        }
        out.placeholder_positions.clear();
        out.template = self.template.replace("V*", word);
        Ok(out)
    }
}

fn placeholder_index(word: &str) -> Option<Option<usize>> {
    let w = word.trim_end_matches([',', '.', '!', '?', ';', ':']);
    let inner = w.strip_prefix('V')?.strip_suffix('*')?;
    if inner.is_empty() {
        Some(None)
    } else {
        inner.parse::<usize>().ok().map(Some)
    }
}

/// Tokenizes `template`, which must contain one placeholder per identity:
/// `V*` (or `V1*`) for a single identity, `V1*` .. `Vn*` for several.
pub fn build_prompt(
    template: &str,
    backend: &dyn DiffusionBackend,
    identities: usize,
) -> Result<PromptSpec> {
    let special = backend.special_tokens();
    let text_len = backend.descriptor().text_len;
    let mut ids = vec![special.start];
    let mut found: Vec<Option<usize>> = vec![None; identities];
    for word in template.split_whitespace() {
        if let Some(idx) = placeholder_index(word) {
            let identity = match (idx, identities) {
                (None, 1) | (Some(1), 1) => 0,
                (None, _) => {
                    return Err(SefiError::prompt(format!(
                        "'V*' is ambiguous with {identities} identities; use V1* .. V{identities}*"
                    )))
                }
                (Some(k), n) if k >= 1 && k <= n => k - 1,
                (Some(k), n) => {
                    return Err(SefiError::prompt(format!(
                        "placeholder V{k}* does not match {n} declared identities"
                    )))
                }
            };
            if found[identity].is_some() {
                return Err(SefiError::prompt(format!(
                    "placeholder for identity {} appears more than once in '{template}'",
                    identity + 1
                )));
            }
            found[identity] = Some(ids.len());
            ids.push(special.placeholder);
        } else {
            ids.extend(backend.tokenize_word(word)?);
        }
    }
    let positions: Vec<usize> = found
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.ok_or_else(|| {
                SefiError::prompt(format!(
                    "'{template}' has no placeholder for identity {}",
                    i + 1
                ))
            })
        })
        .collect::<Result<_>>()?;
    ids.push(special.end);
    if ids.len() > text_len {
        return Err(SefiError::prompt(format!(
            "'{template}' needs {} tokens, text length is {text_len}",
            ids.len()
        )));
    }
    let prompt_len = ids.len();
    ids.resize(text_len, special.pad);
    Ok(PromptSpec {
        template: template.to_string(),
        token_ids: ids,
        placeholder_positions: positions,
        prompt_len,
    })
}

/// A prompt without identity slots (e.g. the empty unconditional prompt).
pub fn build_plain_prompt(text: &str, backend: &dyn DiffusionBackend) -> Result<PromptSpec> {
    if text
        .split_whitespace()
        .any(|w| placeholder_index(w).is_some())
    {
        return Err(SefiError::prompt(format!(
            "'{text}' contains a placeholder"
        )));
    }
    build_prompt(text, backend, 0)
}

/// Reads prompt templates, one per non-empty line.
pub fn read_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Encoder pass with each placeholder's input embedding row replaced by the
/// corresponding single-row node in `slots`.
pub fn encode_with_slots_graph(
    g: &mut Graph,
    backend: &dyn DiffusionBackend,
    prompt: &PromptSpec,
    slots: &[Var],
) -> Result<Var> {
    if slots.len() != prompt.identities() {
        return Err(SefiError::input(format!(
            "{} slot vectors for {} placeholders",
            slots.len(),
            prompt.identities()
        )));
    }
    let d = backend.descriptor().d_text;
    for &s in slots {
        let v = g.value(s);
        if v.shape() != (1, d) {
            return Err(SefiError::config(format!(
                "slot vector has shape {:?}, encoder expects (1, {d})",
                v.shape()
            )));
        }
        if !v.is_finite() {
            return Err(SefiError::input("slot vector contains non-finite values"));
        }
    }
    let base = g.constant(backend.token_embeddings(&prompt.token_ids)?);
    let replacements: Vec<(usize, Var)> = prompt
        .placeholder_positions
        .iter()
        .copied()
        .zip(slots.iter().copied())
        .collect();
    let input = g.replace_rows(base, &replacements);
    backend.encode_text_graph(g, input)
}

pub fn encode_with_slots(
    backend: &dyn DiffusionBackend,
    prompt: &PromptSpec,
    slots: &[&[f64]],
) -> Result<Matrix> {
    let mut g = Graph::new();
    let vars: Vec<Var> = slots
        .iter()
        .map(|s| g.constant(Matrix::row_vector(s.to_vec())))
        .collect();
    let out = encode_with_slots_graph(&mut g, backend, prompt, &vars)?;
    Ok(g.value(out).clone())
}

pub fn encode_with_slot(
    prompt: &PromptSpec,
    slot_vector: &[f64],
    backend: &dyn DiffusionBackend,
) -> Result<Matrix> {
    encode_with_slots(backend, prompt, &[slot_vector])
}

/// Encodes a prompt as written (placeholder rows, if any, are not replaced).
pub fn encode_prompt(backend: &dyn DiffusionBackend, prompt: &PromptSpec) -> Result<Matrix> {
    let mut g = Graph::new();
    let e = g.constant(backend.token_embeddings(&prompt.token_ids)?);
    let out = backend.encode_text_graph(&mut g, e)?;
    Ok(g.value(out).clone())
}

/// Text conditions for the K and V projections at one token pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPair {
    pub k_condition: Matrix,
    pub v_condition: Matrix,
    pub stage: usize,
}

impl ConditionPair {
    /// Both paths fed by the same condition.
    pub fn shared(condition: Matrix, stage: usize) -> Self {
        Self {
            v_condition: condition.clone(),
            k_condition: condition,
            stage,
        }
    }
}

fn check_pair(tokens: &[&ExpandedTokenSet], prompt: &PromptSpec, pair: usize) -> Result<()> {
    if tokens.len() != prompt.identities() {
        return Err(SefiError::input(format!(
            "{} token sets for {} identities",
            tokens.len(),
            prompt.identities()
        )));
    }
    for t in tokens {
        if pair >= t.n_pairs() {
            return Err(SefiError::input(format!(
                "stage {pair} out of range for {} token pairs",
                t.n_pairs()
            )));
        }
    }
    Ok(())
}

/// Condition nodes whose slots are the given K-path / V-path token rows.
pub fn condition_vars(
    g: &mut Graph,
    backend: &dyn DiffusionBackend,
    prompt: &PromptSpec,
    k_slots: &[Var],
    v_slots: &[Var],
) -> Result<CondVars> {
    let k = encode_with_slots_graph(g, backend, prompt, k_slots)?;
    let v = encode_with_slots_graph(g, backend, prompt, v_slots)?;
    Ok(CondVars { k, v })
}

/// K and V conditions at token pair `pair`, one token set per identity.
pub fn conditions_for_stage_multi(
    tokens: &[&ExpandedTokenSet],
    prompt: &PromptSpec,
    pair: usize,
    backend: &dyn DiffusionBackend,
) -> Result<ConditionPair> {
    check_pair(tokens, prompt, pair)?;
    let k: Vec<&[f64]> = tokens.iter().map(|t| t.k_token(pair)).collect();
    let v: Vec<&[f64]> = tokens.iter().map(|t| t.v_token(pair)).collect();
    Ok(ConditionPair {
        k_condition: encode_with_slots(backend, prompt, &k)?,
        v_condition: encode_with_slots(backend, prompt, &v)?,
        stage: pair,
    })
}

pub fn conditions_for_stage(
    tokens: &ExpandedTokenSet,
    prompt: &PromptSpec,
    pair: usize,
    backend: &dyn DiffusionBackend,
) -> Result<ConditionPair> {
    conditions_for_stage_multi(&[tokens], prompt, pair, backend)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProgressiveMode {
    Add,
    Substitute,
}

/// Order in which the `2 * n_pairs` token slots are consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenOrder {
    /// K1, V1, K2, V2, ...
    #[default]
    StageMajor,
    /// K1, K2, ..., V1, V2, ...
    PathMajor,
}

/// A token slot: `(is_value_path, pair)`.
pub fn slot_order(order: TokenOrder, n_pairs: usize) -> Vec<(bool, usize)> {
    match order {
        TokenOrder::StageMajor => (0..n_pairs).flat_map(|i| [(false, i), (true, i)]).collect(),
        TokenOrder::PathMajor => (0..n_pairs)
            .map(|i| (false, i))
            .chain((0..n_pairs).map(|i| (true, i)))
            .collect(),
    }
}

/// Add mode: the first `count` slots (in `order`) come from `base`, the rest
/// hold `initializer`. Substitute mode: the first `count` slots of `base`
/// are replaced by those of `other`.
pub fn progressive_schedule(
    mode: ProgressiveMode,
    count: usize,
    base: &ExpandedTokenSet,
    other: Option<&ExpandedTokenSet>,
    initializer: &[f64],
    order: TokenOrder,
) -> Result<ExpandedTokenSet> {
    let n = base.n_pairs();
    if count > 2 * n {
        return Err(SefiError::input(format!(
            "progressive count {count} outside [0, {}]",
            2 * n
        )));
    }
    let slots = slot_order(order, n);
    match mode {
        ProgressiveMode::Add => {
            if initializer.len() != base.d_text() {
                return Err(SefiError::config(
                    "initializer width differs from token width",
                ));
            }
            let mut out = ExpandedTokenSet::uniform(initializer, n);
            for &(is_v, i) in &slots[..count] {
                copy_slot(&mut out, base, is_v, i);
            }
            Ok(out)
        }
        ProgressiveMode::Substitute => {
            let other = other
                .ok_or_else(|| SefiError::input("substitute mode needs a second token set"))?;
            if other.k_tokens.shape() != base.k_tokens.shape() {
                return Err(SefiError::shape(
                    "substitute token set shape differs from base",
                ));
            }
            let mut out = base.clone();
            for &(is_v, i) in &slots[..count] {
                copy_slot(&mut out, other, is_v, i);
            }
            Ok(out)
        }
    }
}

fn copy_slot(dst: &mut ExpandedTokenSet, src: &ExpandedTokenSet, is_v: bool, i: usize) {
    if is_v {
        dst.v_tokens.row_mut(i).copy_from_slice(src.v_token(i));
    } else {
        dst.k_tokens.row_mut(i).copy_from_slice(src.k_token(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ToyBackend {
        ToyBackend::new(ToyConfig::default()).unwrap()
    }

    fn tokens(seed: u64) -> ExpandedTokenSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExpandedTokenSet::new(
            Matrix::gaussian(5, 16, 1.0, &mut rng),
            Matrix::gaussian(5, 16, 1.0, &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn training_templates_fit_toy_length() {
        let b = toy();
        for t in TRAINING_TEMPLATES {
            let p = build_prompt(t, &b, 1).unwrap();
            assert_eq!(p.token_ids.len(), 16);
            assert_eq!(p.placeholder_positions.len(), 1);
        }
        let p = build_prompt("a photo of a face of V*", &b, 1).unwrap();
        assert_eq!(p.placeholder_positions, vec![7]);
        assert_eq!(p.prompt_len, 9);
        assert_eq!(p.token_ids[8], 1);
        assert_eq!(p.token_ids[9], 2);
    }

    #[test]
    fn prompt_errors() {
        let b = toy();
        assert!(matches!(
            build_prompt("a photo", &b, 1),
            Err(SefiError::Prompt(_))
        ));
        assert!(matches!(
            build_prompt("V* and V*", &b, 1),
            Err(SefiError::Prompt(_))
        ));
        assert!(build_prompt("V* and V2*", &b, 2).is_err());
        assert!(build_prompt("V3* alone", &b, 2).is_err());
        let long = format!("{} V*", "word ".repeat(20));
        assert!(matches!(
            build_prompt(&long, &b, 1),
            Err(SefiError::Prompt(_))
        ));
        assert!(build_plain_prompt("a photo of V*", &b).is_err());
    }

    #[test]
    fn multi_identity_positions() {
        let b = toy();
        let p = build_prompt("V2* hugs V1*.", &b, 2).unwrap();
        assert_eq!(p.placeholder_positions, vec![3, 1]);
    }

    #[test]
    fn slot_substitution_matches_textual_word() {
        let b = toy();
        let p = build_prompt("a photo of the face of V*", &b, 1).unwrap();
        let person = b
            .token_embeddings(&b.tokenize_word("person").unwrap())
            .unwrap();
        let spliced = encode_with_slot(&p, person.row(0), &b).unwrap();
        let textual = encode_prompt(
            &b,
            &build_plain_prompt("a photo of the face of person", &b).unwrap(),
        )
        .unwrap();
        assert!(spliced.bit_eq(&textual));
        let via_with_word = encode_prompt(&b, &p.with_word("person", &b).unwrap()).unwrap();
        assert!(via_with_word.bit_eq(&textual));
    }

    #[test]
    fn causal_encoder_leaves_earlier_positions_untouched() {
        let b = toy();
        let p = build_prompt("a photo of the face of V* smiling", &b, 1).unwrap();
        let slot = p.placeholder_positions[0];
        let t = tokens(1);
        let a = encode_with_slot(&p, t.k_token(0), &b).unwrap();
        let c = encode_with_slot(&p, t.k_token(1), &b).unwrap();
        for r in 0..slot {
            assert_eq!(a.row(r), c.row(r));
        }
        for r in slot..16 {
            assert_ne!(a.row(r), c.row(r));
        }
    }

    #[test]
    fn slot_vector_validation() {
        let b = toy();
        let p = build_prompt("a face of V*", &b, 1).unwrap();
        let mut v = vec![0.1; 16];
        v[3] = f64::NAN;
        assert!(encode_with_slot(&p, &v, &b).is_err());
        assert!(matches!(
            encode_with_slot(&p, &[0.0; 8], &b),
            Err(SefiError::Config(_))
        ));
    }

    #[test]
    fn condition_pairs() {
        let b = toy();
        let p = build_prompt("a photo of a face of V*", &b, 1).unwrap();
        let t = tokens(2);
        let pairs: Vec<ConditionPair> = (0..5)
            .map(|i| conditions_for_stage(&t, &p, i, &b).unwrap())
            .collect();
        for i in 0..5 {
            assert_ne!(pairs[i].k_condition, pairs[i].v_condition);
            for j in 0..i {
                assert_ne!(pairs[i], pairs[j]);
            }
        }
        assert!(conditions_for_stage(&t, &p, 5, &b).is_err());

        let same = ExpandedTokenSet::new(t.k_tokens.clone(), t.k_tokens.clone()).unwrap();
        let c = conditions_for_stage(&same, &p, 3, &b).unwrap();
        assert!(c.k_condition.bit_eq(&c.v_condition));
    }

    #[test]
    fn multi_identity_slots_receive_their_own_tokens() {
        let b = toy();
        let p = build_prompt("V1* next to V2*", &b, 2).unwrap();
        let (a, c) = (tokens(3), tokens(4));
        let got = conditions_for_stage_multi(&[&a, &c], &p, 1, &b).unwrap();
        let manual = encode_with_slots(&b, &p, &[a.k_token(1), c.k_token(1)]).unwrap();
        assert!(got.k_condition.bit_eq(&manual));
        let swapped = encode_with_slots(&b, &p, &[c.k_token(1), a.k_token(1)]).unwrap();
        assert!(!got.k_condition.bit_eq(&swapped));
        assert!(conditions_for_stage_multi(&[&a], &p, 1, &b).is_err());
    }

    #[test]
    fn progressive_endpoints() {
        let base = tokens(5);
        let other = tokens(6);
        let init = vec![0.25; 16];
        let full = progressive_schedule(
            ProgressiveMode::Add,
            10,
            &base,
            None,
            &init,
            TokenOrder::StageMajor,
        )
        .unwrap();
        assert!(full.bit_eq(&base));
        let none = progressive_schedule(
            ProgressiveMode::Add,
            0,
            &base,
            None,
            &init,
            TokenOrder::StageMajor,
        )
        .unwrap();
        assert!(none.bit_eq(&ExpandedTokenSet::uniform(&init, 5)));
        let sub = progressive_schedule(
            ProgressiveMode::Substitute,
            10,
            &base,
            Some(&other),
            &init,
            TokenOrder::StageMajor,
        )
        .unwrap();
        assert!(sub.bit_eq(&other));
        assert!(progressive_schedule(
            ProgressiveMode::Add,
            11,
            &base,
            None,
            &init,
            TokenOrder::StageMajor
        )
        .is_err());
        assert!(progressive_schedule(
            ProgressiveMode::Substitute,
            3,
            &base,
            None,
            &init,
            TokenOrder::StageMajor
        )
        .is_err());
    }

    #[test]
    fn stage_major_order_fills_k_then_v_per_pair() {
        let base = tokens(7);
        let init = vec![0.0; 16];
        let s = progressive_schedule(
            ProgressiveMode::Add,
            3,
            &base,
            None,
            &init,
            TokenOrder::StageMajor,
        )
        .unwrap();
        assert_eq!(s.k_token(0), base.k_token(0));
        assert_eq!(s.v_token(0), base.v_token(0));
        assert_eq!(s.k_token(1), base.k_token(1));
        assert_eq!(s.v_token(1), &init[..]);
        let s = progressive_schedule(
            ProgressiveMode::Add,
            6,
            &base,
            None,
            &init,
            TokenOrder::PathMajor,
        )
        .unwrap();
        assert_eq!(s.k_token(4), base.k_token(4));
        assert_eq!(s.v_token(0), base.v_token(0));
        assert_eq!(s.v_token(1), &init[..]);
    }

    fn differing_slots(a: &ExpandedTokenSet, b: &ExpandedTokenSet) -> usize {
        (0..a.n_pairs())
            .map(|i| {
                usize::from(a.k_token(i) != b.k_token(i))
                    + usize::from(a.v_token(i) != b.v_token(i))
            })
            .sum()
    }

    proptest! {
        #[test]
        fn add_schedule_grows_one_slot_at_a_time(k in 0usize..10, seed in 0u64..50, path_major in any::<bool>()) {
            let base = tokens(seed);
            let init = vec![0.5; 16];
            let order = if path_major { TokenOrder::PathMajor } else { TokenOrder::StageMajor };
            let a = progressive_schedule(ProgressiveMode::Add, k, &base, None, &init, order).unwrap();
            let b = progressive_schedule(ProgressiveMode::Add, k + 1, &base, None, &init, order).unwrap();
            prop_assert_eq!(differing_slots(&a, &b), 1);
        }
    }
}
