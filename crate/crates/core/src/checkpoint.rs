//! `.sefi` checkpoint container.
//!
//! Layout: the 5 magic bytes `SEFI1`, a little-endian `u32` byte length, a
//! UTF-8 JSON metadata block of that length, then every tensor listed in the
//! metadata's `tensors` array as row-major little-endian `f32` values, in
//! that order. Expander tensors come first (layout order), followed by
//! `id_token`, `k_tokens` and `v_tokens`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::error::{Result, SefiError};
use crate::tensor::Matrix;
use crate::token_expander::{expand, parameter_layout, ExpandedTokenSet, ExpanderParams, IdToken};
use crate::trainer::{StepRecord, TrainConfig, Trainer};

pub const MAGIC: &[u8; 5] = b"SEFI1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSnapshot {
    pub name: String,
    pub d_text: usize,
    pub d_cond: usize,
    pub text_len: usize,
    pub total_steps: usize,
}

impl From<&BackendDescriptor> for BackendSnapshot {
    fn from(d: &BackendDescriptor) -> Self {
        Self {
            name: d.name.clone(),
            d_text: d.d_text,
            d_cond: d.d_cond,
            text_len: d.text_len,
            total_steps: d.total_steps(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSummary {
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
    /// Mean `kv` loss over the first and last (up to) 50 steps.
    pub kv_head_mean: Option<f64>,
    pub kv_tail_mean: Option<f64>,
}

impl LossSummary {
    pub fn from_records(records: &[StepRecord]) -> Self {
        let mean = |rs: &[StepRecord]| {
            (!rs.is_empty()).then(|| rs.iter().map(|r| r.losses.kv).sum::<f64>() / rs.len() as f64)
        };
        let w = records.len().min(50);
        Self {
            first_total: records.first().map(|r| r.losses.total),
            last_total: records.last().map(|r| r.losses.total),
            kv_head_mean: mean(&records[..w]),
            kv_tail_mean: mean(&records[records.len() - w..]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub d_text: usize,
    pub n_pairs: usize,
    pub initializer_word: String,
    pub backend: BackendSnapshot,
    pub train_config: TrainConfig,
    pub steps: usize,
    pub loss_summary: LossSummary,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_entries(d_text: usize, n_pairs: usize) -> Vec<TensorEntry> {
    parameter_layout(d_text, n_pairs)
        .into_iter()
        .map(|(name, (r, c))| TensorEntry {
            name,
            shape: [r, c],
        })
        .chain([
            TensorEntry {
                name: "id_token".into(),
                shape: [1, d_text],
            },
            TensorEntry {
                name: "k_tokens".into(),
                shape: [n_pairs, d_text],
            },
            TensorEntry {
                name: "v_tokens".into(),
                shape: [n_pairs, d_text],
            },
        ])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    meta: CheckpointMeta,
    params: ExpanderParams,
    id_token: IdToken,
    tokens: ExpandedTokenSet,
}

impl Checkpoint {
    pub fn new(
        backend: BackendSnapshot,
        train_config: TrainConfig,
        params: ExpanderParams,
        id_token: IdToken,
        steps: usize,
        loss_summary: LossSummary,
    ) -> Result<Self> {
        let tokens = expand(&params, &id_token)?;
        let (d_text, n_pairs) = (params.d_text(), params.n_pairs());
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            d_text,
            n_pairs,
            initializer_word: id_token.source_word.clone(),
            backend,
            train_config,
            steps,
            loss_summary,
            tensors: tensor_entries(d_text, n_pairs),
        };
        Ok(Self {
            meta,
            params,
            id_token,
            tokens,
        })
    }

    pub fn from_trainer(trainer: &Trainer<'_>, records: &[StepRecord]) -> Result<Self> {
        Self::new(
            BackendSnapshot::from(trainer.backend_descriptor()),
            trainer.config().clone(),
            trainer.params().clone(),
            trainer.id_token().clone(),
            trainer.steps(),
            LossSummary::from_records(records),
        )
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn params(&self) -> &ExpanderParams {
        &self.params
    }

    pub fn id_token(&self) -> &IdToken {
        &self.id_token
    }

    pub fn tokens(&self) -> &ExpandedTokenSet {
        &self.tokens
    }

    /// Checks that the checkpoint was produced for a backend of this shape.
    pub fn check_backend(&self, descriptor: &BackendDescriptor) -> Result<()> {
        let b = &self.meta.backend;
        if b.d_text != descriptor.d_text || b.text_len != descriptor.text_len {
            return Err(SefiError::config(format!(
                "checkpoint was trained on {} (d_text {}, L {}), backend is {} (d_text {}, L {})",
                b.name,
                b.d_text,
                b.text_len,
                descriptor.name,
                descriptor.d_text,
                descriptor.text_len
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let len = u32::try_from(json.len())
            .map_err(|_| SefiError::Checkpoint("metadata exceeds 4 GiB".into()))?;
        let mut tensors: Vec<&Matrix> = self.params.tensors();
        let id = self.id_token.as_row();
        tensors.extend([&id, &self.tokens.k_tokens, &self.tokens.v_tokens]);
        let payload: usize = tensors.iter().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| SefiError::Checkpoint(m);
        let header = MAGIC.len() + 4;
        if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing SEFI1 header".into()));
        }
        let len_bytes: [u8; 4] = bytes[MAGIC.len()..header].try_into().expect("4 bytes");
        let len = u32::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(header..header + len)
            .ok_or_else(|| bad(format!("metadata length {len} exceeds file size")))?;
        let meta: CheckpointMeta = serde_json::from_slice(json)
            .map_err(|e| bad(format!("metadata is not valid JSON: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        if meta.tensors != tensor_entries(meta.d_text, meta.n_pairs) {
            return Err(bad("tensor table does not match d_text / n_pairs".into()));
        }
        let payload = &bytes[header + len..];
        let expected: usize = meta
            .tensors
            .iter()
            .map(|t| t.shape[0] * t.shape[1] * 4)
            .sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "payload has {} bytes, metadata declares {expected}",
                payload.len()
            )));
        }
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut offset = 0;
        for entry in &meta.tensors {
            let [r, c] = entry.shape;
            let data = payload[offset..offset + r * c * 4]
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            offset += r * c * 4;
            tensors.push(Matrix::from_vec(r, c, data)?);
        }
        let v_stored = tensors.pop().expect("three token tensors");
        let k_stored = tensors.pop().expect("three token tensors");
        let id = tensors.pop().expect("three token tensors");
        let params = ExpanderParams::from_tensors(meta.d_text, meta.n_pairs, tensors)?;
        let id_token = IdToken::new(id.into_vec(), meta.initializer_word.clone());
        let tokens = expand(&params, &id_token)?;
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(1.0);
        let consistent = |stored: &Matrix, fresh: &Matrix| {
            stored
                .data()
                .iter()
                .zip(fresh.data())
                .all(|(&s, &f)| tol(s, f))
        };
        if !consistent(&k_stored, &tokens.k_tokens) || !consistent(&v_stored, &tokens.v_tokens) {
            return Err(bad("stored tokens disagree with the expander output".into()));
        }
        Ok(Self {
            meta,
            params,
            id_token,
            tokens,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
