use sefi_core::attention_probe::{re2, write_heatmaps};
use sefi_core::backend::predict_eps;
use sefi_core::conditioning::conditions_for_stage;
use sefi_core::stage_scheduler::StageSchedule;

use super::{identity_prompt, initial_noise, load_checkpoint, Context};
use crate::{UsageError, VisualizeArgs};

pub fn visualize_attn(ctx: &Context, args: VisualizeArgs) -> anyhow::Result<()> {
    let backend = ctx.backend();
    let desc = backend.descriptor();
    let total = desc.total_steps();
    if let Some(&t) = args.timesteps.iter().find(|&&t| t >= total) {
        return Err(UsageError(format!("timestep {t} outside [0, {total})")).into());
    }
    let loaded = load_checkpoint(&args.checkpoint, backend)?;
    let tokens = loaded.checkpoint.tokens();
    let prompt = identity_prompt(&ctx.prompt_text(args.prompt.as_ref()), 1, backend)?;
    let stages = StageSchedule::new(total, tokens.n_pairs())?;
    let z_t = initial_noise(backend, ctx.config.sample.seed);
    for &t in &args.timesteps {
        let cond = conditions_for_stage(tokens, &prompt, stages.pair_index(t)?, backend)?;
        let pred = predict_eps(backend, &z_t, t, &cond, true)?;
        let maps = pred.captured_maps.unwrap_or_default();
        let stack = re2(&maps, desc.attention_map_size)?;
        let paths = write_heatmaps(&stack, &ctx.out, t)?;
        log::info!("t={t}: {} heatmaps", paths.len());
    }
    println!("{}", ctx.out.display());
    Ok(())
}
