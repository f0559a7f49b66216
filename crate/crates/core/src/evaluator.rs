//! Prompt, ID, Detect and ID(Prompt) metrics over generated images.
//!
//! Scoring models are behind small traits. The stub scorers are cheap
//! deterministic image statistics for tests; [`TableScorer`] replays scores
//! computed elsewhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, SefiError};
use crate::imaging::Image;

pub const DEFAULT_THRESHOLD: f64 = 0.23;

/// One generated image with the prompt it was sampled from.
#[derive(Debug, Clone)]
pub struct EvalSample {
    /// Identifier used by table-backed scorers (the manifest's image path).
    pub name: String,
    pub image: Image,
    pub prompt: String,
}

pub trait PromptScorer {
    fn prompt_score(&self, sample: &EvalSample) -> Result<f64>;
}

pub trait IdScorer {
    /// Identity similarity in `[-1, 1]`.
    fn id_score(&self, sample: &EvalSample, reference: &Image) -> Result<f64>;
}

pub trait FaceDetector {
    fn detect(&self, sample: &EvalSample) -> Result<bool>;
}

pub struct ScorerSuite<'a> {
    pub prompt: &'a dyn PromptScorer,
    pub id: &'a dyn IdScorer,
    pub detector: &'a dyn FaceDetector,
}

/// Half the mean red channel.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubPromptScorer;

impl PromptScorer for StubPromptScorer {
    fn prompt_score(&self, sample: &EvalSample) -> Result<f64> {
        Ok(0.5 * sample.image.channel_mean(0))
    }
}

/// Cosine similarity of the two images' pixels centered at 0.5.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubIdScorer;

impl IdScorer for StubIdScorer {
    fn id_score(&self, sample: &EvalSample, reference: &Image) -> Result<f64> {
        let reference = reference.resize(sample.image.width(), sample.image.height());
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (a, b) in sample.image.data().iter().zip(reference.data()) {
            let (a, b) = (a - 0.5, b - 0.5);
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Fires when the mean green channel is at least 0.5.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubFaceDetector;

impl FaceDetector for StubFaceDetector {
    fn detect(&self, sample: &EvalSample) -> Result<bool> {
        Ok(sample.image.channel_mean(1) >= 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub prompt: f64,
    pub id: f64,
    pub face: bool,
}

/// Precomputed scores keyed by sample name, read from a JSON object
/// `{"<name>": {"prompt": .., "id": .., "face": ..}, ...}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableScorer {
    entries: BTreeMap<String, TableEntry>,
}

impl TableScorer {
    pub fn new(entries: BTreeMap<String, TableEntry>) -> Self {
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }

    fn entry(&self, sample: &EvalSample) -> Result<&TableEntry> {
        self.entries
            .get(&sample.name)
            .ok_or_else(|| SefiError::input(format!("no precomputed scores for '{}'", sample.name)))
    }
}

impl PromptScorer for TableScorer {
    fn prompt_score(&self, sample: &EvalSample) -> Result<f64> {
        Ok(self.entry(sample)?.prompt)
    }
}

impl IdScorer for TableScorer {
    fn id_score(&self, sample: &EvalSample, _reference: &Image) -> Result<f64> {
        Ok(self.entry(sample)?.id)
    }
}

impl FaceDetector for TableScorer {
    fn detect(&self, sample: &EvalSample) -> Result<bool> {
        Ok(self.entry(sample)?.face)
    }
}

/// ID score gated to zero when the prompt score is below `threshold`.
/// A prompt score equal to the threshold is not below it.
pub fn id_prompt_score(prompt_score: f64, id_score: f64, threshold: f64) -> f64 {
    if prompt_score < threshold {
        0.0
    } else {
        id_score
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub prompt_mean: f64,
    pub id_mean: f64,
    pub detect_rate: f64,
    pub id_prompt_mean: f64,
    pub threshold: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScores {
    pub prompt: f64,
    /// Zero when no face was detected.
    pub id: f64,
    pub detected: bool,
}

pub fn score_samples(
    samples: &[EvalSample],
    reference: &Image,
    suite: &ScorerSuite<'_>,
) -> Result<Vec<SampleScores>> {
    samples
        .iter()
        .map(|s| {
            let prompt = suite.prompt.prompt_score(s)?;
            let detected = suite.detector.detect(s)?;
            let id = if detected {
                suite.id.id_score(s, reference)?
            } else {
                0.0
            };
            Ok(SampleScores {
                prompt,
                id,
                detected,
            })
        })
        .collect()
}

pub fn aggregate(scores: &[SampleScores], threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(SefiError::input("cannot evaluate an empty image set"));
    }
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&SampleScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        prompt_mean: mean(&|s| s.prompt),
        id_mean: mean(&|s| s.id),
        detect_rate: mean(&|s| if s.detected { 1.0 } else { 0.0 }),
        id_prompt_mean: mean(&|s| id_prompt_score(s.prompt, s.id, threshold)),
        threshold,
        n_images: scores.len(),
    })
}

pub fn evaluate(
    samples: &[EvalSample],
    reference: &Image,
    suite: &ScorerSuite<'_>,
    threshold: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(SefiError::input("cannot evaluate an empty image set"));
    }
    aggregate(&score_samples(samples, reference, suite)?, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub prompt: String,
}

/// Reads a JSON-lines manifest; relative image paths are resolved against
/// the manifest's directory. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| SefiError::input(format!("manifest line {}: {e}", i + 1)))?;
        if entry.image.is_relative() {
            entry.image = base.join(&entry.image);
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    /// Materialized token values: `2 * n_pairs * d_text`.
    pub trainable: usize,
    /// Every expander parameter.
    pub added: usize,
}

pub fn count_parameters(checkpoint: &Checkpoint) -> ParameterCount {
    let params = checkpoint.params();
    ParameterCount {
        trainable: 2 * params.n_pairs() * params.d_text(),
        added: params.count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(name: &str, rgb: [f64; 3]) -> EvalSample {
        EvalSample {
            name: name.into(),
            image: Image::filled(4, 4, rgb),
            prompt: "a photo".into(),
        }
    }

    #[test]
    fn gating_truth_table() {
        assert_eq!(id_prompt_score(0.20, 0.9, 0.23), 0.0);
        assert_eq!(id_prompt_score(0.23, 0.9, 0.23), 0.9);
        assert_eq!(id_prompt_score(0.30, 0.9, 0.23), 0.9);
        assert_eq!(id_prompt_score(0.30, -0.4, 0.23), -0.4);
    }

    #[test]
    fn stub_scorers() {
        let s = sample("a", [0.6, 0.5, 0.1]);
        assert!((StubPromptScorer.prompt_score(&s).unwrap() - 0.3).abs() < 1e-15);
        assert!(StubFaceDetector.detect(&s).unwrap());
        assert!(!StubFaceDetector
            .detect(&sample("b", [0.6, 0.49, 0.1]))
            .unwrap());
        let mut img = Image::filled(4, 4, [0.5; 3]);
        img.set_pixel(0, 0, [1.0, 0.0, 0.7]);
        let s = EvalSample {
            image: img.clone(),
            ..s
        };
        assert!((StubIdScorer.id_score(&s, &img).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = Image::filled(4, 4, [0.5; 3]);
        neg.set_pixel(0, 0, [0.0, 1.0, 0.3]);
        assert!((StubIdScorer.id_score(&s, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(StubIdScorer.id_score(&s, &flat).unwrap(), 0.0);
    }

    #[test]
    fn four_image_fixture_matches_hand_arithmetic() {
        let table = TableScorer::new(BTreeMap::from([
            (
                "a".into(),
                TableEntry {
                    prompt: 0.30,
                    id: 0.50,
                    face: true,
                },
            ),
            (
                "b".into(),
                TableEntry {
                    prompt: 0.20,
                    id: 0.40,
                    face: true,
                },
            ),
            (
                "c".into(),
                TableEntry {
                    prompt: 0.25,
                    id: 0.90,
                    face: false,
                },
            ),
            (
                "d".into(),
                TableEntry {
                    prompt: 0.23,
                    id: -0.10,
                    face: true,
                },
            ),
        ]));
        let suite = ScorerSuite {
            prompt: &table,
            id: &table,
            detector: &table,
        };
        let samples: Vec<_> = ["a", "b", "c", "d"]
            .iter()
            .map(|n| sample(n, [0.0; 3]))
            .collect();
        let r = evaluate(&samples, &Image::filled(4, 4, [0.0; 3]), &suite, 0.23).unwrap();
        assert!((r.prompt_mean - (0.30 + 0.20 + 0.25 + 0.23) / 4.0).abs() < 1e-12);
        assert!((r.id_mean - (0.50 + 0.40 + 0.0 - 0.10) / 4.0).abs() < 1e-12);
        assert!((r.detect_rate - 0.75).abs() < 1e-12);
        assert!((r.id_prompt_mean - (0.50 + 0.0 + 0.0 - 0.10) / 4.0).abs() < 1e-12);
        assert_eq!(r.n_images, 4);
    }

    #[test]
    fn degenerate_reports() {
        let all_clear = [
            SampleScores {
                prompt: 0.5,
                id: 0.3,
                detected: true,
            },
            SampleScores {
                prompt: 0.4,
                id: 0.1,
                detected: true,
            },
        ];
        let r = aggregate(&all_clear, 0.23).unwrap();
        assert_eq!(r.id_prompt_mean, r.id_mean);
        let none = aggregate(&all_clear, 0.9).unwrap();
        assert_eq!(none.id_prompt_mean, 0.0);
        assert!(aggregate(&[], 0.23).is_err());

        let never = StubFaceDetector;
        let suite = ScorerSuite {
            prompt: &StubPromptScorer,
            id: &StubIdScorer,
            detector: &never,
        };
        let dark = [sample("x", [0.9, 0.1, 0.2]), sample("y", [0.1, 0.2, 0.9])];
        let r = evaluate(&dark, &Image::filled(4, 4, [0.7; 3]), &suite, 0.23).unwrap();
        assert_eq!(r.detect_rate, 0.0);
        assert_eq!(r.id_mean, 0.0);
    }

    #[test]
    fn table_scorer_missing_entry() {
        let t = TableScorer::default();
        assert!(t.prompt_score(&sample("z", [0.0; 3])).is_err());
    }

    #[test]
    fn manifest_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            "{\"image\": \"a.png\", \"prompt\": \"p\"}\n\n{\"image\": \"/abs/b.png\", \"prompt\": \"q\"}\n",
        )
        .unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].image, dir.path().join("a.png"));
        assert_eq!(m[1].image, PathBuf::from("/abs/b.png"));
        std::fs::write(&path, "{\"img\": 1}\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
