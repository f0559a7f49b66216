//! Deterministic DDIM sampling (eta = 0) with classifier-free guidance and
//! per-stage token pairs.

use super::{predict_eps, predict_eps_single, DiffusionBackend, NoiseSchedule};
use crate::attention_probe::RawAttentionMap;
use crate::conditioning::{
    build_plain_prompt, conditions_for_stage_multi, encode_prompt, PromptSpec,
};
use crate::error::{Result, SefiError};
use crate::imaging::Image;
use crate::stage_scheduler::{uniform_timestep_map, StageSchedule};
use crate::tensor::Matrix;
use crate::token_expander::ExpandedTokenSet;

/// Which denoiser passes a guidance weight needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceBranch {
    Unconditional,
    Conditional,
    Both,
}

impl GuidanceBranch {
    pub fn for_weight(w: f64) -> Self {
        if w == 0.0 {
            Self::Unconditional
        } else if w == 1.0 {
            Self::Conditional
        } else {
            Self::Both
        }
    }
}

/// `eps_u + w * (eps_c - eps_u)`, returning the operand itself at `w = 0`
/// and `w = 1`.
pub fn guided_eps(eps_uncond: &Matrix, eps_cond: &Matrix, w: f64) -> Matrix {
    match GuidanceBranch::for_weight(w) {
        GuidanceBranch::Unconditional => eps_uncond.clone(),
        GuidanceBranch::Conditional => eps_cond.clone(),
        GuidanceBranch::Both => eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u)),
    }
}

/// One eta = 0 DDIM update from `t` to `t_prev` (`None` means the clean
/// endpoint, alpha_bar = 1).
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Matrix,
    eps: &Matrix,
    t: usize,
    t_prev: Option<usize>,
) -> Result<Matrix> {
    if z_t.shape() != eps.shape() {
        return Err(SefiError::input(
            "latent and noise prediction differ in shape",
        ));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) => schedule.alpha_bar(p)?,
        None => 1.0,
    };
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(z_t.zip_map(eps, |z, e| {
        let x0 = (z - sb * e) / sa;
        pa * x0 + pb * e
    }))
}

#[derive(Debug, Clone)]
pub struct DdimRun {
    /// Timesteps visited, in sampling (descending) order.
    pub timesteps: Vec<usize>,
    /// Initial noise followed by the latent after every step.
    pub trajectory: Vec<Matrix>,
}

impl DdimRun {
    pub fn final_latent(&self) -> &Matrix {
        self.trajectory
            .last()
            .expect("trajectory holds the initial latent")
    }
}

/// Runs `steps` DDIM updates with a caller-supplied noise predictor
/// `eps_fn(z_t, t, step)`.
pub fn ddim_loop(
    schedule: &NoiseSchedule,
    init: &Matrix,
    steps: usize,
    mut eps_fn: impl FnMut(&Matrix, usize, usize) -> Result<Matrix>,
) -> Result<DdimRun> {
    let mut timesteps = uniform_timestep_map(schedule.total_steps(), steps)?;
    timesteps.reverse();
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(init.clone());
    for (i, &t) in timesteps.iter().enumerate() {
        let z = trajectory.last().expect("non-empty");
        let eps = eps_fn(z, t, i)?;
        if !eps.is_finite() {
            return Err(SefiError::input(format!(
                "non-finite noise prediction at t={t}"
            )));
        }
        let next = ddim_step(schedule, z, &eps, t, timesteps.get(i + 1).copied())?;
        trajectory.push(next);
    }
    Ok(DdimRun {
        timesteps,
        trajectory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f64,
    /// Record the conditional branch's attention maps at every step.
    pub capture: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            capture: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepCapture {
    pub step: usize,
    pub timestep: usize,
    pub pair: usize,
    pub maps: Vec<RawAttentionMap>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub run: DdimRun,
    /// Token pair used at each sampling step.
    pub pairs: Vec<usize>,
    pub image: Image,
    pub captures: Vec<StepCapture>,
}

/// Samples an image for `prompt`, one token set per identity placeholder.
/// The unconditional branch uses the empty prompt on both K and V paths.
pub fn ddim_sample(
    backend: &dyn DiffusionBackend,
    init_noise: &Matrix,
    prompt: &PromptSpec,
    tokens: &[&ExpandedTokenSet],
    stages: &StageSchedule,
    options: SampleOptions,
) -> Result<SampleOutput> {
    let desc = backend.descriptor();
    if options.steps == 0 {
        return Err(SefiError::input("sampling needs at least one step"));
    }
    if !(options.guidance >= 0.0 && options.guidance.is_finite()) {
        return Err(SefiError::input(format!(
            "guidance scale {} must be finite and non-negative",
            options.guidance
        )));
    }
    desc.latent.check(init_noise)?;
    if stages.total_steps() != desc.total_steps() {
        return Err(SefiError::config(format!(
            "stage schedule covers {} timesteps, backend has {}",
            stages.total_steps(),
            desc.total_steps()
        )));
    }
    if let Some(t) = tokens.iter().find(|t| t.n_pairs() != stages.n_stages()) {
        return Err(SefiError::config(format!(
            "token set has {} pairs but the schedule has {} stages",
            t.n_pairs(),
            stages.n_stages()
        )));
    }

    let branch = GuidanceBranch::for_weight(options.guidance);
    let uncond = if branch == GuidanceBranch::Conditional {
        None
    } else {
        Some(encode_prompt(backend, &build_plain_prompt("", backend)?)?)
    };
    let mut cond_cache = vec![None; stages.n_stages()];
    let mut pairs = Vec::with_capacity(options.steps);
    let mut captures = Vec::new();
    let map = uniform_timestep_map(desc.total_steps(), options.steps)?;

    let run = ddim_loop(&desc.schedule, init_noise, options.steps, |z, t, step| {
        let stage = stages.stage_of_sampling_step(options.steps - 1 - step, options.steps, &map)?;
        let pair = stages.n_stages() - 1 - stage;
        pairs.push(pair);
        let eps_u = match &uncond {
            Some(u) => Some(predict_eps_single(backend, z, t, u)?),
            None => None,
        };
        let eps_c = if branch == GuidanceBranch::Unconditional {
            None
        } else {
            if cond_cache[pair].is_none() {
                cond_cache[pair] = Some(conditions_for_stage_multi(tokens, prompt, pair, backend)?);
            }
            let cond = cond_cache[pair].as_ref().expect("filled above");
            let pred = predict_eps(backend, z, t, cond, options.capture)?;
            if let Some(maps) = pred.captured_maps {
                captures.push(StepCapture {
                    step,
                    timestep: t,
                    pair,
                    maps,
                });
            }
            Some(pred.eps)
        };
        Ok(match (eps_u, eps_c) {
            (Some(u), Some(c)) => guided_eps(&u, &c, options.guidance),
            (Some(u), None) => u,
            (None, Some(c)) => c,
            (None, None) => unreachable!("at least one branch runs"),
        })
    })?;
    let image = backend.vae_decode(run.final_latent())?;
    Ok(SampleOutput {
        run,
        pairs,
        image,
        captures,
    })
}
