//! Rectified-flow objective, training loop and Euler sampler.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{
    build_view_attention_mask, generate_region_mask, pose_anchor_frame, MaskingMode, PoseAngles, DEFAULT_RM_RATIO,
};
use crate::model::{
    concat_sequence, LatentVideo, Model, PatchEncoder, PromptEmbedding, ReferenceLatent, TokenSequence,
};
use crate::rope::{RopeScheme, MAX_REFS};
use crate::tensor::{adam_step, sgd_step, AdamState, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub v_target: Tensor,
}

pub fn standard_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// `z_t = (1 - t) z0 + t eps`, `v = eps - z0`, with `eps` seeded.
pub fn make_flow_sample(z0: &Tensor, seed: u64, t: f64) -> Result<FlowSample> {
    flow_sample_with_noise(z0, standard_normal(z0.shape(), seed), t)
}

pub fn flow_sample_with_noise(z0: &Tensor, eps: Tensor, t: f64) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    let z_t = z0.zip_map(&eps, |a, e| (1.0 - t) * a + t * e)?;
    let v_target = eps.zip_map(z0, |e, a| e - a)?;
    Ok(FlowSample {
        z0: z0.clone(),
        eps,
        t,
        z_t,
        v_target,
    })
}

/// Mean squared error.
pub fn flow_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("flow_loss", pred.shape(), target.shape()));
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Learning-rate schedule over the steps of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero over the run.
    Cosine,
    /// Constant, then linear down to zero over the last fifth of the run.
    Tail,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, steps: usize) -> f64 {
        let x = step as f64 / steps.max(1) as f64;
        match self {
            Self::Constant => base,
            Self::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * x).cos()),
            Self::Tail => base * ((1.0 - x) / 0.2).min(1.0),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            "tail" => Ok(Self::Tail),
            other => Err(Error::Config(format!("unknown lr schedule {other:?}"))),
        }
    }
}

/// Optimizer memory carried between steps.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    adam: AdamState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub masking: MaskingMode,
    pub scheme: RopeScheme,
    pub rm_ratio: f64,
    pub num_refs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            schedule: LrSchedule::Constant,
            steps: 500,
            batch_size: 1,
            lr: 0.02,
            seed: 0,
            masking: MaskingMode::None,
            scheme: RopeScheme::RdRope,
            rm_ratio: DEFAULT_RM_RATIO,
            num_refs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.rm_ratio) {
            return Err(Error::Config(format!("rm ratio {} outside [0, 1]", self.rm_ratio)));
        }
        if self.num_refs == 0 || self.num_refs > MAX_REFS {
            return Err(Error::Config(format!(
                "number of references must be in 1..={MAX_REFS}, got {}",
                self.num_refs
            )));
        }
        Ok(())
    }
}

/// One training clip: pixels, reference images and the poses needed for
/// view masking.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    /// `[frames, H, W, C]`
    pub video: Tensor,
    pub fps: f64,
    /// `[H, W, C]` each.
    pub references: Vec<Tensor>,
    pub reference_poses: Vec<PoseAngles>,
    pub frame_poses: Vec<PoseAngles>,
    pub prompt: String,
}

/// Conditioning for one example: encoded clean video plus possibly masked
/// references, laid out under `scheme`.
pub fn prepare_sequence(
    model: &Model,
    encoder: &PatchEncoder,
    example: &TrainingExample,
    config: &TrainConfig,
    seed: u64,
) -> Result<TokenSequence> {
    if example.references.len() < config.num_refs {
        return Err(Error::InvalidArgument(format!(
            "example has {} references, {} requested",
            example.references.len(),
            config.num_refs
        )));
    }
    let video = encoder.encode_video(&example.video, example.fps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs = example.references[..config.num_refs]
        .iter()
        .map(|img| {
            let mask_seed: u64 = rng.random();
            let mask = if config.masking.region() {
                let (h, w) = (img.shape()[0], img.shape()[1]);
                Some(generate_region_mask(h, w, config.rm_ratio, mask_seed)?)
            } else {
                None
            };
            encoder.encode_reference(img, mask.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let rope = crate::rope::RopeConfig {
        num_refs: config.num_refs,
        ..model.rope_config()?
    };
    let seq = concat_sequence(&video, &refs, config.scheme, &rope)?;
    if config.masking.view() {
        let ct = encoder.config().temporal_compression;
        let anchors = (0..video.groups())
            .map(|i| {
                let f = pose_anchor_frame(i, ct);
                example.frame_poses.get(f).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("no pose for anchor frame {f}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let poses = example.reference_poses.get(..config.num_refs).ok_or_else(|| {
            Error::InvalidArgument("view masking needs one pose per reference".into())
        })?;
        let mask = build_view_attention_mask(&seq.layout, &anchors, poses)?;
        return seq.with_view_mask(mask);
    }
    Ok(seq)
}

/// One optimizer step on the mean flow loss of `batch`, starting from fresh
/// optimizer state. Returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    encoder: &PatchEncoder,
    batch: &[TrainingExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    train_step_with(model, encoder, batch, config, seed, &mut OptimizerState::default())
}

/// As [`train_step`], continuing from `state`.
pub fn train_step_with(
    model: &mut Model,
    encoder: &PatchEncoder,
    batch: &[TrainingExample],
    config: &TrainConfig,
    seed: u64,
    state: &mut OptimizerState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grads: Vec<Vec<f64>> = model.params.tensors().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for example in batch {
        let seq = prepare_sequence(model, encoder, example, config, rng.random())?;
        let t: f64 = rng.random_range(0.0..=1.0);
        let sample = make_flow_sample(&seq.video_tokens(), rng.random(), t)?;
        let noised = seq.with_video_tokens(&sample.z_t)?;
        let prompt = PromptEmbedding::from_text(&example.prompt, model.config.prompt_len, model.config.width);

        let (loss, g) = model.loss_and_grads(&noised, t, &prompt, &sample.v_target)?;
        total += loss * scale;
        for (acc, g) in grads.iter_mut().zip(&g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
        }
    }
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut params: Vec<&mut Tensor> = model.params.tensors_mut().iter_mut().collect();
    match config.optimizer {
        OptimizerKind::Sgd => sgd_step(&mut params, &grad_refs, config.lr)?,
        OptimizerKind::Adam => adam_step(&mut params, &grad_refs, config.lr, &mut state.adam)?,
    }
    Ok(total)
}

/// Runs `config.steps` steps, drawing batches uniformly with replacement.
/// Returns `(step, loss)` pairs.
pub fn train(
    model: &mut Model,
    encoder: &PatchEncoder,
    corpus: &[TrainingExample],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    let mut state = OptimizerState::default();
    for step in 0..config.steps {
        let batch: Vec<TrainingExample> = (0..config.batch_size)
            .map(|_| corpus[rng.random_range(0..corpus.len())].clone())
            .collect();
        let lr = config.schedule.lr_at(config.lr, step, config.steps);
        let loss = train_step_with(model, encoder, &batch, &TrainConfig { lr, ..config.clone() }, rng.random(), &mut state)?;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(format!("loss diverged at step {step}")));
        }
        on_step(step, loss);
        curve.push((step, loss));
    }
    Ok(curve)
}

/// Flow loss of the model on `draws` fixed `(t, eps)` pairs, with `t` at the
/// midpoints of `draws` equal strata of `[0, 1]`. `seq` holds the clean
/// video tokens.
pub fn probe_loss(
    model: &Model,
    seq: &TokenSequence,
    prompt: &PromptEmbedding,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidArgument("probe needs at least one draw".into()));
    }
    let z0 = seq.video_tokens();
    let mut total = 0.0;
    for k in 0..draws {
        let t = (k as f64 + 0.5) / draws as f64;
        let s = make_flow_sample(&z0, seed.wrapping_add(k as u64), t)?;
        let pred = model.forward(&seq.with_video_tokens(&s.z_t)?, t, prompt)?;
        total += flow_loss(&pred, &s.v_target)?;
    }
    Ok(total / draws as f64)
}

pub fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (step, loss) in curve {
        writeln!(f, "{step},{loss}")?;
    }
    f.flush()?;
    Ok(())
}

pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

/// Euler integration from `t = 1` to `t = 0` in `steps` equal steps.
pub fn euler_integrate(field: &impl VelocityField, z1: Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.velocity(&z, t)?;
        z = z.zip_map(&v, |a, b| a - dt * b)?;
    }
    Ok(z)
}

/// The model as a velocity field over video tokens with fixed conditioning.
pub struct ConditionedModel<'a> {
    pub model: &'a Model,
    pub sequence: TokenSequence,
    pub prompt: PromptEmbedding,
}

impl VelocityField for ConditionedModel<'_> {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let seq = self.sequence.with_video_tokens(z)?;
        self.model.forward(&seq, t.clamp(0.0, 1.0), &self.prompt)
    }
}

/// What to generate from: clean references, prompt and clip length.
#[derive(Clone, Debug)]
pub struct SampleConditions {
    pub references: Vec<ReferenceLatent>,
    pub prompt: PromptEmbedding,
    pub latent_frames: usize,
    pub fps: f64,
    /// Anchor poses per latent and reference poses, when view masking is used.
    pub view_poses: Option<(Vec<PoseAngles>, Vec<PoseAngles>)>,
}

/// Token sequence for `conditions` with `video` as the video block.
pub fn conditioned_sequence(model: &Model, conditions: &SampleConditions, video: &Tensor) -> Result<TokenSequence> {
    let cfg = &model.config;
    if let Some(r) = conditions.references.iter().find(|r| r.origin != crate::model::LatentOrigin::Clean) {
        return Err(Error::InvalidArgument(format!("sampling expects clean references, got {:?}", r.origin)));
    }
    let shape = [conditions.latent_frames, cfg.grid_h, cfg.grid_w, cfg.latent_dim];
    let latents = LatentVideo {
        latents: video.clone().reshape(&shape)?,
        fps: conditions.fps,
        source_frames: 0,
    };
    let rope = crate::rope::RopeConfig {
        num_refs: conditions.references.len(),
        ..model.rope_config()?
    };
    let mut seq = concat_sequence(&latents, &conditions.references, cfg.scheme, &rope)?;
    if let Some((anchors, poses)) = &conditions.view_poses {
        let mask = build_view_attention_mask(&seq.layout, anchors, poses)?;
        seq = seq.with_view_mask(mask)?;
    }
    Ok(seq)
}

/// Sequence whose video block is seeded Gaussian noise scaled to the flow
/// state at time `t` with a zero clean signal.
pub fn probe_sequence(model: &Model, conditions: &SampleConditions, t: f64, seed: u64) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    let cfg = &model.config;
    let shape = [conditions.latent_frames, cfg.grid_h, cfg.grid_w, cfg.latent_dim];
    conditioned_sequence(model, conditions, &standard_normal(&shape, seed).map(|v| v * t))
}

pub fn sample(model: &Model, conditions: &SampleConditions, steps: usize, seed: u64) -> Result<LatentVideo> {
    let cfg = &model.config;
    let shape = [conditions.latent_frames, cfg.grid_h, cfg.grid_w, cfg.latent_dim];
    let seq = conditioned_sequence(model, conditions, &standard_normal(&shape, seed))?;
    let field = ConditionedModel {
        model,
        sequence: seq.clone(),
        prompt: conditions.prompt.clone(),
    };
    let z = euler_integrate(&field, seq.video_tokens(), steps)?;
    Ok(LatentVideo {
        latents: z.reshape(&shape)?,
        fps: conditions.fps,
        source_frames: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolant_endpoints() {
        let z0 = standard_normal(&[3, 4], 1);
        let s0 = make_flow_sample(&z0, 2, 0.0).unwrap();
        assert_eq!(s0.z_t, z0);
        let s1 = make_flow_sample(&z0, 2, 1.0).unwrap();
        assert_eq!(s1.z_t, s1.eps);
        assert!(make_flow_sample(&z0, 2, 1.01).is_err());
        assert!(make_flow_sample(&z0, 2, -0.1).is_err());
    }

    #[test]
    fn interpolant_arithmetic() {
        let s = flow_sample_with_noise(&Tensor::zeros(&[2]), Tensor::filled(&[2], 2.0), 0.5).unwrap();
        assert_eq!(s.z_t.data(), &[1.0, 1.0]);
        assert_eq!(s.v_target.data(), &[2.0, 2.0]);
    }

    #[test]
    fn loss_basics() {
        let a = standard_normal(&[5, 3], 4);
        assert_eq!(flow_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x + 1.0);
        assert!((flow_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(flow_loss(&a, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn euler_single_step() {
        let field = |z: &Tensor, t: f64| Ok(z.map(|v| v * t + 1.0));
        let z = euler_integrate(&field, Tensor::filled(&[1], 2.0), 1).unwrap();
        assert_eq!(z.data(), &[2.0 - 3.0]);
        assert!(euler_integrate(&field, Tensor::filled(&[1], 2.0), 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        for sched in [LrSchedule::Constant, LrSchedule::Cosine, LrSchedule::Tail] {
            assert_eq!(sched.lr_at(0.1, 0, 500), 0.1);
            assert!((0..500).all(|k| sched.lr_at(0.1, k, 500) > 0.0));
        }
        assert_eq!(LrSchedule::Tail.lr_at(0.1, 399, 500), 0.1);
        assert!((LrSchedule::Tail.lr_at(0.1, 450, 500) - 0.05).abs() < 1e-12);
        assert!((LrSchedule::Cosine.lr_at(0.1, 250, 500) - 0.05).abs() < 1e-12);
        assert!(TrainConfig { num_refs: 4, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { rm_ratio: 1.5, ..TrainConfig::default() }.validate().is_err());
    }
}
