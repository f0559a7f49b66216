//! Single-image optimization of the token expander.
//!
//! Each step samples a prompt template, augments the face image, noises its
//! latent at a uniformly drawn timestep and runs the frozen denoiser with
//! the K/V tokens of that timestep's stage. The loss is the noise-prediction
//! MSE plus `lambda` times the attention loss against a reference prompt in
//! which the placeholder is the initializer word.

mod adam;
mod augment;

pub use adam::Adam;
pub use augment::{augment, AugmentConfig, AugmentRecord, JITTER};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_probe::{
    attention_loss_graph, reference_maps_graph, AttentionProbe, LossOption,
};
use crate::autodiff::Graph;
use crate::backend::{BackendDescriptor, DiffusionBackend};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{
    build_prompt, condition_vars, encode_prompt, PromptSpec, TRAINING_TEMPLATES,
};
use crate::error::{Result, SefiError};
use crate::imaging::Image;
use crate::stage_scheduler::StageSchedule;
use crate::tensor::Matrix;
use crate::token_expander::{
    expand_graph, init_expander, parameter_layout, ExpanderParams, IdToken,
    DEFAULT_INITIALIZER_WORD, DEFAULT_N_PAIRS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda_attention: f64,
    /// One epoch is one optimization step on the single image.
    pub epochs: usize,
    pub n_pairs: usize,
    pub loss_option: LossOption,
    pub rng_seed: u64,
    pub color_jitter: bool,
    pub hflip_p: f64,
    pub scale_range: [f64; 2],
    /// Side the face image is resized to before augmentation.
    pub image_size: usize,
    pub initializer_word: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            lambda_attention: 0.003,
            epochs: 1000,
            n_pairs: DEFAULT_N_PAIRS,
            loss_option: LossOption::Full,
            rng_seed: 0,
            color_jitter: true,
            hflip_p: 0.5,
            scale_range: [0.1, 1.0],
            image_size: 512,
            initializer_word: DEFAULT_INITIALIZER_WORD.into(),
        }
    }
}

impl TrainConfig {
    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            color_jitter: self.color_jitter,
            hflip_p: self.hflip_p,
            scale_range: self.scale_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SefiError::config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.lambda_attention >= 0.0 && self.lambda_attention.is_finite()) {
            return Err(SefiError::config(format!(
                "lambda_attention must be finite and >= 0, got {}",
                self.lambda_attention
            )));
        }
        if self.n_pairs == 0 {
            return Err(SefiError::config("n_pairs must be at least 1"));
        }
        if self.image_size == 0 {
            return Err(SefiError::config("image_size must be positive"));
        }
        self.augment_config().validate()
    }
}

/// Where the attention loss takes its reference K-path condition from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceSource {
    /// The template with the initializer word typed at the placeholder.
    #[default]
    InitializerPrompt,
    /// The target pass's own K-path condition (detached); the attention loss
    /// is then identically zero.
    TargetKCondition,
}

/// Random draws of one training step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub template: usize,
    pub timestep: usize,
    pub noise: Matrix,
    pub z_t: Matrix,
    pub augment: AugmentRecord,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub total: f64,
    pub kv: f64,
    pub attention: f64,
}

#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub losses: Losses,
    pub pair: usize,
    /// Gradient of the total loss for every expander tensor, layout order.
    pub gradients: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    pub timestep: usize,
    pub pair: usize,
    pub losses: Losses,
}

pub struct Trainer<'a> {
    backend: &'a dyn DiffusionBackend,
    config: TrainConfig,
    params: ExpanderParams,
    id_token: IdToken,
    stages: StageSchedule,
    prompts: Vec<PromptSpec>,
    references: Vec<Matrix>,
    reference_source: ReferenceSource,
    face: Image,
    adam: Adam,
    rng: ChaCha8Rng,
    steps: usize,
}

/// Input embedding of a single-token word.
pub fn word_token(backend: &dyn DiffusionBackend, word: &str) -> Result<IdToken> {
    let ids = backend.tokenize_word(word)?;
    let [id] = ids[..] else {
        return Err(SefiError::config(format!(
            "initializer word '{word}' must be a single token, got {}",
            ids.len()
        )));
    };
    let emb = backend.token_embeddings(&[id])?;
    Ok(IdToken::new(emb.row(0).to_vec(), word))
}

impl<'a> Trainer<'a> {
    pub fn new(
        backend: &'a dyn DiffusionBackend,
        config: TrainConfig,
        face: &Image,
    ) -> Result<Self> {
        config.validate()?;
        let desc = backend.descriptor();
        let id_token = word_token(backend, &config.initializer_word)?;
        let params = init_expander(desc.d_text, config.n_pairs, config.rng_seed)?;
        let stages = StageSchedule::new(desc.total_steps(), config.n_pairs)?;
        let mut prompts = Vec::with_capacity(TRAINING_TEMPLATES.len());
        let mut references = Vec::with_capacity(TRAINING_TEMPLATES.len());
        for template in TRAINING_TEMPLATES {
            let prompt = build_prompt(template, backend, 1)?;
            let reference = prompt.with_word(&config.initializer_word, backend)?;
            references.push(encode_prompt(backend, &reference)?);
            prompts.push(prompt);
        }
        if face.is_empty() {
            return Err(SefiError::input("face image is empty"));
        }
        let face = face.resize(config.image_size, config.image_size);
        let shapes: Vec<(usize, usize)> = parameter_layout(desc.d_text, config.n_pairs)
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let adam = Adam::new(config.lr, &shapes);
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(1);
        Ok(Self {
            backend,
            config,
            params,
            id_token,
            stages,
            prompts,
            references,
            reference_source: ReferenceSource::default(),
            face,
            adam,
            rng,
            steps: 0,
        })
    }

    pub fn with_reference_source(mut self, source: ReferenceSource) -> Self {
        self.reference_source = source;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ExpanderParams {
        &self.params
    }

    pub fn id_token(&self) -> &IdToken {
        &self.id_token
    }

    pub fn backend_descriptor(&self) -> &BackendDescriptor {
        self.backend.descriptor()
    }

    pub fn stages(&self) -> &StageSchedule {
        &self.stages
    }

    pub fn prompts(&self) -> &[PromptSpec] {
        &self.prompts
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sample_step_inputs(&mut self) -> Result<StepInputs> {
        let desc = self.backend.descriptor();
        let template = self.rng.random_range(0..self.prompts.len());
        let (augmented, record) =
            augment(&self.face, &self.config.augment_config(), &mut self.rng)?;
        let native = augmented.resize(desc.image_size, desc.image_size);
        let z0 = self.backend.vae_encode(&native)?;
        let timestep = self.rng.random_range(0..desc.total_steps());
        let noise = Matrix::gaussian(
            desc.latent.pixels(),
            desc.latent.channels,
            1.0,
            &mut self.rng,
        );
        let z_t = self.backend.add_noise(&z0, timestep, &noise)?;
        Ok(StepInputs {
            template,
            timestep,
            noise,
            z_t,
            augment: record,
        })
    }

    /// Forward and backward pass for `params` on fixed step inputs.
    pub fn evaluate(&self, params: &ExpanderParams, inputs: &StepInputs) -> Result<LossEvaluation> {
        let backend = self.backend;
        let desc = backend.descriptor();
        let prompt = &self.prompts[inputs.template];
        let t = inputs.timestep;
        let pair = self.stages.pair_index(t)?;
        let n = params.n_pairs();

        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let id = g.constant(self.id_token.as_row());
        let sequence = expand_graph(&mut g, &vars, id);
        let k_slot = g.slice_rows(sequence, pair, 1);
        let v_slot = g.slice_rows(sequence, n + pair, 1);
        let cond = condition_vars(&mut g, backend, prompt, &[k_slot], &[v_slot])?;

        let z = g.constant(inputs.z_t.clone());
        let mut probe = AttentionProbe::new();
        let eps_hat = backend.predict_eps_graph(&mut g, z, t, cond, Some(&mut probe))?;
        let noise = g.constant(inputs.noise.clone());
        let kv = g.mse(eps_hat, noise);

        let size = desc.attention_map_size;
        let a_t = probe.canonical(&mut g, size)?;
        let reference_k = match self.reference_source {
            ReferenceSource::InitializerPrompt => {
                g.constant(self.references[inputs.template].clone())
            }
            ReferenceSource::TargetKCondition => g.detach(cond.k),
        };
        let a_r = reference_maps_graph(&mut g, backend, &probe, reference_k, size)?;
        let slot = prompt.placeholder_positions[0];
        let attention = attention_loss_graph(
            &mut g,
            &a_r,
            &a_t,
            self.config.loss_option,
            slot,
            prompt.prompt_len,
        )?;
        let weighted = g.scale(attention, self.config.lambda_attention);
        let total = g.add(kv, weighted);

        let losses = Losses {
            total: g.value(total).get(0, 0),
            kv: g.value(kv).get(0, 0),
            attention: g.value(attention).get(0, 0),
        };
        if !(losses.total.is_finite() && losses.kv.is_finite() && losses.attention.is_finite()) {
            return Err(SefiError::NonFiniteLoss {
                timestep: t,
                stage: self.stages.stage_of(t)?,
                total: losses.total,
                kv: losses.kv,
                attention: losses.attention,
            });
        }
        let grads = g.backward(total);
        Ok(LossEvaluation {
            losses,
            pair,
            gradients: vars.gradients(&g, &grads),
        })
    }

    /// One optimization step on freshly sampled inputs.
    pub fn training_step(&mut self) -> Result<StepRecord> {
        let inputs = self.sample_step_inputs()?;
        let eval = self.evaluate(&self.params, &inputs)?;
        self.adam.step(self.params.tensors_mut(), &eval.gradients)?;
        self.steps += 1;
        debug!(
            "step {} t={} pair={} total={:.6} kv={:.6} att={:.6}",
            self.steps,
            inputs.timestep,
            eval.pair,
            eval.losses.total,
            eval.losses.kv,
            eval.losses.attention
        );
        Ok(StepRecord {
            step: self.steps,
            timestep: inputs.timestep,
            pair: eval.pair,
            losses: eval.losses,
        })
    }
}

pub const LOSS_CSV_HEADER: &str = "step,total,kv,attention";

pub fn losses_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step, r.losses.total, r.losses.kv, r.losses.attention
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
    pub checkpoint_path: Option<PathBuf>,
    pub losses_path: Option<PathBuf>,
}

/// Runs `config.epochs` steps on `face`. With `out_dir`, writes
/// `losses.csv` and `checkpoint.sefi` there.
pub fn train_on_image(
    backend: &dyn DiffusionBackend,
    config: &TrainConfig,
    face: &Image,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(backend, config.clone(), face)?;
    let mut records = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let r = trainer.training_step()?;
        if r.step % 100 == 0 {
            info!(
                "step {} total={:.6} kv={:.6}",
                r.step, r.losses.total, r.losses.kv
            );
        }
        records.push(r);
    }
    let checkpoint = Checkpoint::from_trainer(&trainer, &records)?;
    let (mut checkpoint_path, mut losses_path) = (None, None);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let lp = dir.join("losses.csv");
        std::fs::write(&lp, losses_csv(&records))?;
        let cp = dir.join("checkpoint.sefi");
        checkpoint.save(&cp)?;
        losses_path = Some(lp);
        checkpoint_path = Some(cp);
    }
    Ok(TrainOutput {
        checkpoint,
        records,
        checkpoint_path,
        losses_path,
    })
}

pub fn train(
    backend: &dyn DiffusionBackend,
    config: &TrainConfig,
    face_image_path: &Path,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let face = Image::load(face_image_path)?;
    train_on_image(backend, config, &face, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ToyBackend, ToyConfig};

    fn face() -> Image {
        let mut img = Image::filled(32, 32, [0.2, 0.3, 0.4]);
        for y in 8..24 {
            for x in 10..22 {
                img.set_pixel(x, y, [0.9, 0.7, 0.6]);
            }
        }
        img
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            image_size: 32,
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lr, c.lambda_attention, c.epochs, c.n_pairs),
            (0.005, 0.003, 1000, 5)
        );
        assert_eq!(c.loss_option, LossOption::Full);
        assert_eq!(c.image_size, 512);
        assert!(c.validate().is_ok());
        assert!(TrainConfig {
            lr: -1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda_attention: -0.1,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            hflip_p: 2.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { n_pairs: 0, ..c }.validate().is_err());
        let parsed: TrainConfig =
            serde_json::from_str(r#"{"lr": 0.01, "loss_option": 1}"#).unwrap();
        assert_eq!(parsed.lr, 0.01);
        assert_eq!(parsed.loss_option, LossOption::SlotOnly);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lrr": 0.01}"#).is_err());
    }

    #[test]
    fn loss_assembly_and_lambda_zero() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let mut t = Trainer::new(&backend, small_config(), &face()).unwrap();
        for _ in 0..5 {
            let r = t.training_step().unwrap();
            let l = r.losses;
            assert_eq!(l.total, l.kv + 0.003 * l.attention);
        }
        let cfg = TrainConfig {
            lambda_attention: 0.0,
            ..small_config()
        };
        let mut t = Trainer::new(&backend, cfg, &face()).unwrap();
        for _ in 0..5 {
            let l = t.training_step().unwrap().losses;
            assert_eq!(l.total, l.kv);
        }
    }

    #[test]
    fn self_reference_gives_zero_attention_loss() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let mut t = Trainer::new(&backend, small_config(), &face())
            .unwrap()
            .with_reference_source(ReferenceSource::TargetKCondition);
        for _ in 0..3 {
            let l = t.training_step().unwrap().losses;
            assert_eq!(l.attention, 0.0);
            assert_eq!(l.total, l.kv);
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            ..small_config()
        };
        let mut t = Trainer::new(&backend, cfg, &face()).unwrap();
        let before = t.params().clone();
        t.training_step().unwrap();
        for (a, b) in before.tensors().iter().zip(t.params().tensors()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn initializer_token_is_frozen() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let mut t = Trainer::new(&backend, small_config(), &face()).unwrap();
        let id = t.id_token().clone();
        let before = t.params().clone();
        for _ in 0..3 {
            t.training_step().unwrap();
        }
        assert_eq!(t.id_token().vector, id.vector);
        assert!(!before.tensors()[0].bit_eq(t.params().tensors()[0]));
    }

    #[test]
    fn training_is_deterministic() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let a = train_on_image(&backend, &small_config(), &face(), None).unwrap();
        let b = train_on_image(&backend, &small_config(), &face(), None).unwrap();
        assert_eq!(losses_csv(&a.records), losses_csv(&b.records));
        assert!(losses_csv(&a.records).starts_with("step,total,kv,attention\n1,"));
    }

    #[test]
    fn multi_token_initializer_rejected() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let cfg = TrainConfig {
            initializer_word: "".into(),
            ..small_config()
        };
        assert!(Trainer::new(&backend, cfg, &face()).is_err());
    }
}
