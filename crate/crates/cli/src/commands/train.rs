use anyhow::Context as _;
use log::info;

use sefi_core::attention_probe::LossOption;
use sefi_core::trainer;

use super::Context;
use crate::TrainArgs;

pub fn train(ctx: &Context, args: TrainArgs) -> anyhow::Result<()> {
    let mut config = ctx.config.train.clone();
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(l) = args.lambda {
        config.lambda_attention = l;
    }
    if let Some(n) = args.n_pairs {
        config.n_pairs = n;
    }
    if let Some(o) = args.loss_option {
        config.loss_option = LossOption::try_from(o)?;
    }
    let out = trainer::train(ctx.backend(), &config, &args.image, Some(&ctx.out))
        .with_context(|| format!("training on {}", args.image.display()))?;
    if let (Some(first), Some(last)) = (out.records.first(), out.records.last()) {
        info!(
            "{} steps, total loss {:.5} -> {:.5}",
            out.records.len(),
            first.losses.total,
            last.losses.total
        );
    }
    println!("{}", ctx.out.join("checkpoint.sefi").display());
    Ok(())
}
