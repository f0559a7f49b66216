use anyhow::Context as _;

use sefi_core::evaluator::{
    evaluate, read_manifest, EvalSample, ScorerSuite, StubFaceDetector, StubIdScorer,
    StubPromptScorer, TableScorer,
};
use sefi_core::imaging::Image;

use super::{write_json, Context};
use crate::config::ScorerKind;
use crate::{EvalArgs, UsageError};

pub fn eval(ctx: &Context, args: EvalArgs) -> anyhow::Result<()> {
    let cfg = &ctx.config.eval;
    let manifest = args
        .manifest
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| UsageError("eval needs --manifest or eval.manifest".into()))?;
    let threshold = args.threshold.unwrap_or(cfg.threshold);
    let samples = read_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            let image =
                Image::load(&e.image).with_context(|| format!("loading {}", e.image.display()))?;
            Ok(EvalSample {
                name: e.image.to_string_lossy().into_owned(),
                image,
                prompt: e.prompt,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let reference = Image::load(&args.reference)
        .with_context(|| format!("loading reference {}", args.reference.display()))?;

    let report = match args.scorer.unwrap_or(cfg.scorer) {
        ScorerKind::Stub => {
            let suite = ScorerSuite {
                prompt: &StubPromptScorer,
                id: &StubIdScorer,
                detector: &StubFaceDetector,
            };
            evaluate(&samples, &reference, &suite, threshold)?
        }
        ScorerKind::Table => {
            let path = args
                .scores
                .or_else(|| cfg.scores.clone())
                .ok_or_else(|| UsageError("table scorer needs --scores or eval.scores".into()))?;
            let table = TableScorer::load(&path)?;
            let suite = ScorerSuite {
                prompt: &table,
                id: &table,
                detector: &table,
            };
            evaluate(&samples, &reference, &suite, threshold)?
        }
    };
    let path = ctx.out.join("metrics.json");
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
