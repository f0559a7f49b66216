use std::path::PathBuf;

use log::info;
use serde::Serialize;

use sefi_core::attention_probe::LossOption;
use sefi_core::conditioning::{progressive_schedule, ProgressiveMode, TokenOrder};
use sefi_core::imaging::Image;
use sefi_core::trainer;

use super::{
    identity_prompt, load_checkpoint, render, write_json, CheckpointRef, Context, SamplingParams,
};
use crate::config::AblateMode;
use crate::{AblateArgs, TokenOrderArg, UsageError};

#[derive(Debug, Serialize)]
struct ProgressiveEntry {
    count: usize,
    image: String,
}

#[derive(Debug, Serialize)]
struct ProgressiveIndex {
    mode: ProgressiveMode,
    order: TokenOrder,
    prompt: String,
    seed: u64,
    steps: usize,
    guidance: f64,
    checkpoints: Vec<CheckpointRef>,
    runs: Vec<ProgressiveEntry>,
}

#[derive(Debug, Serialize)]
struct GridEntry {
    n_pairs: usize,
    loss_option: LossOption,
    dir: String,
    final_total_loss: Option<f64>,
}

pub fn ablate(ctx: &Context, args: AblateArgs) -> anyhow::Result<()> {
    let mode = args.mode.unwrap_or(ctx.config.ablate.mode);
    match mode {
        AblateMode::Add => progressive(ctx, args, ProgressiveMode::Add),
        AblateMode::Substitute => progressive(ctx, args, ProgressiveMode::Substitute),
        AblateMode::TrainGrid => train_grid(ctx, args),
    }
}

fn progressive(ctx: &Context, args: AblateArgs, mode: ProgressiveMode) -> anyhow::Result<()> {
    let backend = ctx.backend();
    let wanted = match mode {
        ProgressiveMode::Add => 1,
        ProgressiveMode::Substitute => 2,
    };
    if args.checkpoints.len() != wanted {
        return Err(UsageError(format!(
            "{mode:?} ablation takes {wanted} --checkpoint, got {}",
            args.checkpoints.len()
        ))
        .into());
    }
    let loaded = args
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p, backend))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let base = &loaded[0].checkpoint;
    let other = loaded.get(1).map(|c| c.checkpoint.tokens());
    let n_pairs = base.tokens().n_pairs();
    if let Some(o) = other {
        if o.n_pairs() != n_pairs {
            return Err(UsageError("checkpoints disagree on n_pairs".into()).into());
        }
    }
    let order = match args.order {
        Some(TokenOrderArg::StageMajor) => TokenOrder::StageMajor,
        Some(TokenOrderArg::PathMajor) => TokenOrder::PathMajor,
        None => ctx.config.ablate.order,
    };
    let counts = args
        .counts
        .or_else(|| ctx.config.ablate.counts.clone())
        .unwrap_or_else(|| (0..=2 * n_pairs).collect());
    if let Some(&c) = counts.iter().find(|&&c| c > 2 * n_pairs) {
        return Err(UsageError(format!("count {c} outside [0, {}]", 2 * n_pairs)).into());
    }

    let text = ctx.prompt_text(args.prompt.as_ref());
    let prompt = identity_prompt(&text, 1, backend)?;
    let params = SamplingParams {
        steps: ctx.config.sample.steps,
        guidance: ctx.config.sample.guidance,
        seed: ctx.config.sample.seed,
    };
    let tag = match mode {
        ProgressiveMode::Add => "add",
        ProgressiveMode::Substitute => "substitute",
    };

    let mut runs = Vec::with_capacity(counts.len());
    let mut images = Vec::with_capacity(counts.len());
    for &count in &counts {
        let tokens = progressive_schedule(
            mode,
            count,
            base.tokens(),
            other,
            &base.id_token().vector,
            order,
        )?;
        let image = render(backend, &prompt, &[&tokens], params)?;
        let name = format!("{tag}_{count:02}.png");
        image.save_png(&ctx.out.join(&name))?;
        info!("{name}");
        runs.push(ProgressiveEntry { count, image: name });
        images.push(image);
    }
    strip(&images).save_png(&ctx.out.join("grid.png"))?;
    write_json(
        &ctx.out.join("index.json"),
        &ProgressiveIndex {
            mode,
            order,
            prompt: text,
            seed: params.seed,
            steps: params.steps,
            guidance: params.guidance,
            checkpoints: loaded.iter().map(CheckpointRef::from).collect(),
            runs,
        },
    )?;
    println!("{}", ctx.out.join("index.json").display());
    Ok(())
}

/// Images side by side, left to right.
fn strip(images: &[Image]) -> Image {
    let h = images.iter().map(Image::height).max().unwrap_or(0);
    let w: usize = images.iter().map(Image::width).sum();
    let mut out = Image::filled(w, h, [0.0; 3]);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set_pixel(x0 + x, y, img.pixel(x, y));
            }
        }
        x0 += img.width();
    }
    out
}

fn train_grid(ctx: &Context, args: AblateArgs) -> anyhow::Result<()> {
    let image = args
        .image
        .ok_or_else(|| UsageError("train-grid needs --image".into()))?;
    let n_pairs = args
        .n_pairs
        .unwrap_or_else(|| ctx.config.ablate.n_pairs.clone());
    let options = match args.loss_options {
        Some(raw) => raw
            .into_iter()
            .map(LossOption::try_from)
            .collect::<Result<Vec<_>, _>>()?,
        None => ctx.config.ablate.loss_options.clone(),
    };
    let mut entries = Vec::new();
    for &n in &n_pairs {
        for &option in &options {
            let mut config = ctx.config.train.clone();
            config.n_pairs = n;
            config.loss_option = option;
            let dir_name = format!("n{n:02}_opt{}", u8::from(option));
            let dir: PathBuf = ctx.out.join(&dir_name);
            let out = trainer::train(ctx.backend(), &config, &image, Some(&dir))?;
            info!("{dir_name} trained");
            entries.push(GridEntry {
                n_pairs: n,
                loss_option: option,
                dir: dir_name,
                final_total_loss: out.records.last().map(|r| r.losses.total),
            });
        }
    }
    write_json(&ctx.out.join("index.json"), &entries)?;
    println!("{}", ctx.out.join("index.json").display());
    Ok(())
}
