use sefi_core::token_expander::ExpandedTokenSet;

use super::{
    identity_prompt, load_checkpoint, render, write_json, CheckpointRef, Context, SampleSidecar,
    SamplingParams,
};
use crate::SampleArgs;

pub fn sample(ctx: &Context, args: SampleArgs) -> anyhow::Result<()> {
    let backend = ctx.backend();
    let loaded = args
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p, backend))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let text = ctx.prompt_text(args.prompt.as_ref());
    let prompt = identity_prompt(&text, loaded.len(), backend)?;
    let params = SamplingParams {
        steps: args.steps.unwrap_or(ctx.config.sample.steps),
        guidance: args.guidance.unwrap_or(ctx.config.sample.guidance),
        seed: ctx.config.sample.seed,
    };
    let tokens: Vec<&ExpandedTokenSet> = loaded.iter().map(|c| c.checkpoint.tokens()).collect();
    let image = render(backend, &prompt, &tokens, params)?;

    let png = ctx.out.join(format!("{}.png", args.name));
    image.save_png(&png)?;
    write_json(
        &ctx.out.join(format!("{}.json", args.name)),
        &SampleSidecar {
            prompt: &text,
            seed: params.seed,
            steps: params.steps,
            guidance: params.guidance,
            checkpoints: loaded.iter().map(CheckpointRef::from).collect(),
        },
    )?;
    println!("{}", png.display());
    Ok(())
}
