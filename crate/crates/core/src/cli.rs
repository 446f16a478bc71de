//! Command-line front end: argument and config-file parsing plus subcommand
//! dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datapipe::{self, clip_seed, ClipRecord, PipelineConfig};
use crate::error::{Error, Result};
use crate::flow::{self, LrSchedule, OptimizerKind, SampleConditions, TrainConfig, TrainingExample};
use crate::masking::{MaskingMode, PoseAngles, ViewMaskMode, DEFAULT_RM_RATIO};
use crate::metrics::{self, extractor_from_spec, ReferenceSet, DEFAULT_REFERENCE_SET_SIZE};
use crate::model::{EncoderConfig, Model, ModelConfig, PatchEncoder, PromptEmbedding};
use crate::rope::{AxisLayout, RopeScheme, MAX_REFS};
use crate::synth;
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};
use crate::trajectory::{self, Projection};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_PROMPT: &str = "a person slowly turning their head";

#[derive(Parser, Debug)]
#[command(name = "mvref", version, about = "Multi-view reference conditioning toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Each may also come from the config
/// file under the same name; flags win.
#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// key = value settings file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// vanilla | toffset | rdrope
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// none | rm | vm | rm+vm
    #[arg(long, global = true)]
    masking: Option<String>,
    #[arg(long, global = true)]
    rm_ratio: Option<String>,
    #[arg(long, global = true)]
    num_refs: Option<String>,
    /// on: blocked logits get -inf before softmax; off: blocked weights are
    /// zeroed after softmax without renormalising
    #[arg(long, global = true)]
    vm_renorm: Option<String>,
    #[arg(long, global = true)]
    layers: Option<String>,
    #[arg(long, global = true)]
    width: Option<String>,
    #[arg(long, global = true)]
    heads: Option<String>,
    #[arg(long, global = true)]
    latent_dim: Option<String>,
    #[arg(long, global = true)]
    rope_base: Option<String>,
    #[arg(long, global = true)]
    temporal_offset: Option<String>,
    /// blocked | interleaved
    #[arg(long, global = true)]
    rope_layout: Option<String>,
    /// on | off
    #[arg(long, global = true)]
    time_modulation: Option<String>,
    /// on | off
    #[arg(long, global = true)]
    position_table: Option<String>,
    #[arg(long, global = true)]
    ffn_mult: Option<String>,
    /// sgd | adam
    #[arg(long, global = true)]
    optimizer: Option<String>,
    /// constant | cosine | tail
    #[arg(long, global = true)]
    lr_schedule: Option<String>,
}

impl GlobalArgs {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("seed", &self.seed),
            ("scheme", &self.scheme),
            ("masking", &self.masking),
            ("rm-ratio", &self.rm_ratio),
            ("num-refs", &self.num_refs),
            ("vm-renorm", &self.vm_renorm),
            ("layers", &self.layers),
            ("width", &self.width),
            ("heads", &self.heads),
            ("latent-dim", &self.latent_dim),
            ("rope-base", &self.rope_base),
            ("temporal-offset", &self.temporal_offset),
            ("rope-layout", &self.rope_layout),
            ("time-modulation", &self.time_modulation),
            ("position-table", &self.position_table),
            ("ffn-mult", &self.ffn_mult),
            ("optimizer", &self.optimizer),
            ("lr-schedule", &self.lr_schedule),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Train the toy model on a clip manifest
    Train(TrainArgs),
    /// Generate a clip from a checkpoint
    Sample(SampleArgs),
    /// Score identity consistency of a generated clip
    Eval(EvalArgs),
    /// Facial-direction trajectory plot and statistics
    Traj(TrajArgs),
    /// Attention concentration on reference views
    Attn(AttnArgs),
    /// Filter a clip manifest and choose reference frames
    Datapipe(DatapipeArgs),
}

#[derive(Args, Debug, Clone, PartialEq)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Defaults to `<out>/loss.csv`
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

/// Where the identity and reference poses come from.
#[derive(Args, Debug, Clone, PartialEq, Default)]
pub struct ConditionArgs {
    /// Clip manifest; the clip's identity and reference frames are used
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Clip id within the manifest (default: first clip)
    #[arg(long)]
    pub clip: Option<String>,
    /// Synthetic identity with default reference poses
    #[arg(long)]
    pub identity: Option<u64>,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    pub prompt: String,
}

#[derive(Args, Debug, Clone, PartialEq)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cond: ConditionArgs,
    /// Euler steps
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
}

#[derive(Args, Debug, Clone, PartialEq)]
pub struct EvalArgs {
    /// Generate from this checkpoint first
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Existing `[frames, H, W, C]` tensor file to score instead
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// Directory of `[H, W, C]` reference tensor files
    #[arg(long)]
    pub refs: Option<PathBuf>,
    #[command(flatten)]
    pub cond: ConditionArgs,
    /// synthetic | exec:<path>
    #[arg(long, default_value = "synthetic")]
    pub extractor: String,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Output directory for the score CSV (and generated clip)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq)]
pub struct TrajArgs {
    /// JSON-lines of {frame, yaw, pitch, roll}
    #[arg(long)]
    pub poses: PathBuf,
    /// SVG output
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// xy | xz | zy
    #[arg(long, default_value = "xy")]
    pub projection: String,
    #[arg(long, default_value_t = trajectory::DEFAULT_CONE_DEG)]
    pub cone: f64,
    #[arg(long, default_value_t = trajectory::DEFAULT_MIN_RUN)]
    pub min_run: usize,
}

#[derive(Args, Debug, Clone, PartialEq)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cond: ConditionArgs,
    /// Layer to read (default: mean over all layers and heads)
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    /// Flow time of the probe
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    /// Concentration CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Sequence layout JSON
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq)]
pub struct DatapipeArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Generate this many synthetic annotation records instead of reading --in
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub quality_threshold: f64,
    #[arg(long, default_value_t = 0.8)]
    pub min_coverage: f64,
    #[arg(long, default_value_t = 3.0)]
    pub min_duration: f64,
    #[arg(long, default_value_t = 100)]
    pub max_attempts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub scheme: RopeScheme,
    pub masking: MaskingMode,
    pub rm_ratio: f64,
    pub num_refs: usize,
    pub view_mask_mode: ViewMaskMode,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub rope_base: f64,
    pub temporal_offset: u32,
    pub rope_layout: AxisLayout,
    pub time_modulation: bool,
    pub position_table: bool,
    pub ffn_mult: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
}

#[derive(Debug)]
pub enum CliError {
    /// Help or version text; not an error.
    Info(String),
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    fn with_defaults(command: Command) -> Self {
        let m = ModelConfig::default();
        Self {
            command,
            seed: 0,
            scheme: RopeScheme::RdRope,
            masking: MaskingMode::None,
            rm_ratio: DEFAULT_RM_RATIO,
            num_refs: 3,
            view_mask_mode: ViewMaskMode::PreSoftmax,
            layers: m.layers,
            width: m.width,
            heads: m.heads,
            latent_dim: m.latent_dim,
            rope_base: m.rope_base,
            temporal_offset: m.temporal_offset,
            rope_layout: m.rope_layout,
            time_modulation: m.time_modulation,
            position_table: m.position_table,
            ffn_mult: m.ffn_mult,
            optimizer: TrainConfig::default().optimizer,
            lr_schedule: TrainConfig::default().schedule,
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), CliError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, CliError> {
            v.parse().map_err(|_| usage(format!("invalid value {v:?} for {key}")))
        }
        fn on_off(key: &str, v: &str) -> std::result::Result<bool, CliError> {
            match v {
                "on" => Ok(true),
                "off" => Ok(false),
                other => Err(usage(format!("{key} takes on or off, got {other:?}"))),
            }
        }
        let key = key.replace('_', "-");
        match key.as_str() {
            "seed" => self.seed = num(&key, value)?,
            "scheme" => self.scheme = value.parse().map_err(|e: Error| usage(e.to_string()))?,
            "masking" => self.masking = value.parse().map_err(|e: Error| usage(e.to_string()))?,
            "rm-ratio" => {
                let r: f64 = num(&key, value)?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(usage(format!("rm-ratio {r} outside [0, 1]")));
                }
                self.rm_ratio = r;
            }
            "num-refs" => {
                let n: usize = num(&key, value)?;
                if n == 0 || n > MAX_REFS {
                    return Err(usage(format!("num-refs must be in 1..={MAX_REFS}, got {n}")));
                }
                self.num_refs = n;
            }
            "vm-renorm" => {
                self.view_mask_mode = match value {
                    "on" => ViewMaskMode::PreSoftmax,
                    "off" => ViewMaskMode::PostSoftmaxZero,
                    other => return Err(usage(format!("vm-renorm takes on or off, got {other:?}"))),
                }
            }
            "layers" => self.layers = num(&key, value)?,
            "width" => self.width = num(&key, value)?,
            "heads" => self.heads = num(&key, value)?,
            "latent-dim" => self.latent_dim = num(&key, value)?,
            "rope-base" => self.rope_base = num(&key, value)?,
            "temporal-offset" => self.temporal_offset = num(&key, value)?,
            "rope-layout" => self.rope_layout = value.parse().map_err(|e: Error| usage(e.to_string()))?,
            "time-modulation" => self.time_modulation = on_off(&key, value)?,
            "position-table" => self.position_table = on_off(&key, value)?,
            "ffn-mult" => self.ffn_mult = num(&key, value)?,
            "optimizer" => self.optimizer = value.parse().map_err(|e: Error| usage(e.to_string()))?,
            "lr-schedule" => self.lr_schedule = value.parse().map_err(|e: Error| usage(e.to_string()))?,
            other => return Err(usage(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            latent_dim: self.latent_dim,
            num_refs: self.num_refs,
            rope_base: self.rope_base,
            temporal_offset: self.temporal_offset,
            rope_layout: self.rope_layout,
            time_modulation: self.time_modulation,
            position_table: self.position_table,
            ffn_mult: self.ffn_mult,
            scheme: self.scheme,
            masking: self.masking,
            view_mask_mode: self.view_mask_mode,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            latent_dim: self.latent_dim,
            seed: self.seed,
            ..EncoderConfig::default()
        }
    }

    pub fn train_config(&self, steps: usize, lr: Option<f64>, batch_size: usize) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            optimizer: self.optimizer,
            schedule: self.lr_schedule,
            steps,
            batch_size,
            lr: lr.unwrap_or(d.lr),
            seed: self.seed,
            masking: self.masking,
            scheme: self.scheme,
            rm_ratio: self.rm_ratio,
            num_refs: self.num_refs,
            ..d
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> std::result::Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", k + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Builds the run configuration from `argv` (program name first) and the
/// text of the config file, if any. Precedence: flags, then file, then
/// defaults.
pub fn parse_config(argv: &[String], file_text: Option<&str>) -> std::result::Result<RunConfig, CliError> {
    let cli = Cli::try_parse_from(argv).map_err(clap_error)?;
    let mut cfg = RunConfig::with_defaults(cli.command);
    if let Some(text) = file_text {
        for (k, v) in parse_config_file(text)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in cli.global.pairs() {
        cfg.set(k, v)?;
    }
    cfg.model_config()
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// As [`parse_config`], reading the file named by `--config`.
pub fn parse_args(argv: &[String]) -> std::result::Result<RunConfig, CliError> {
    let cli = Cli::try_parse_from(argv).map_err(clap_error)?;
    let text = match &cli.global.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    parse_config(argv, text.as_deref())
}

fn clap_error(e: clap::Error) -> CliError {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            CliError::Info(e.render().to_string())
        }
        _ => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            CliError::Usage(first)
        }
    }
}

/// Full entry point; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let result = parse_args(argv).and_then(|cfg| dispatch(&cfg).map_err(CliError::Runtime));
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Info(text)) => {
            print!("{text}");
            EXIT_OK
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: usage: {}", one_line(&msg));
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}: {}", e.code(), one_line(&e.to_string()));
            EXIT_RUNTIME
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn dispatch(cfg: &RunConfig) -> Result<()> {
    match &cfg.command {
        Command::Train(a) => cmd_train(cfg, a),
        Command::Sample(a) => cmd_sample(cfg, a).map(|_| ()),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Traj(a) => cmd_traj(a),
        Command::Attn(a) => cmd_attn(cfg, a),
        Command::Datapipe(a) => cmd_datapipe(cfg, a),
    }
}

fn frames_per_clip(model: &ModelConfig, enc: &EncoderConfig) -> usize {
    model.latent_frames * enc.temporal_compression
}

fn image_size(model: &ModelConfig, enc: &EncoderConfig) -> usize {
    model.grid_h * enc.spatial_compression
}

/// `count` indices spread evenly over `0..len`.
fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if count <= 1 || len <= 1 {
        return vec![0; count];
    }
    (0..count)
        .map(|k| ((k * (len - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

fn reference_frames(record: &ClipRecord, n: usize, seed: u64) -> Result<Vec<usize>> {
    match &record.reference_frames {
        Some(f) if f.len() >= n => Ok(f[..n].to_vec()),
        _ => datapipe::sample_references(record, n, clip_seed(seed, &record.clip_id), 100),
    }
}

fn frame_of(video: &Tensor, k: usize) -> Result<Tensor> {
    let s = video.shape();
    let per = s[1] * s[2] * s[3];
    if k >= s[0] {
        return Err(Error::InvalidArgument(format!("frame {k} outside a {}-frame clip", s[0])));
    }
    Tensor::new(&s[1..], video.data()[k * per..(k + 1) * per].to_vec())
}

/// Training clip for one manifest record: frames spread over the clip,
/// references at the record's reference frames.
pub fn example_from_record(
    record: &ClipRecord,
    model: &ModelConfig,
    enc: &EncoderConfig,
    seed: u64,
) -> Result<TrainingExample> {
    let frames = frames_per_clip(model, enc);
    let size = image_size(model, enc);
    if record.poses.is_empty() {
        return Err(Error::InvalidArgument(format!("clip {} has no poses", record.clip_id)));
    }
    let picks = spread_indices(record.poses.len(), frames);
    let frame_poses: Vec<PoseAngles> = picks.iter().map(|&k| record.poses[k]).collect();
    let ref_frames = reference_frames(record, model.num_refs, seed)?;
    let reference_poses: Vec<PoseAngles> = ref_frames.iter().map(|&k| record.poses[k]).collect();
    let (video, references) = match (&record.video_path, record.identity) {
        (Some(path), _) => {
            let all = read_tensor_file(Path::new(path))?;
            if all.rank() != 4 || all.shape()[0] != record.poses.len() {
                return Err(Error::InvalidArgument(format!(
                    "{path}: expected [{}, H, W, C] pixels, got {:?}",
                    record.poses.len(),
                    all.shape()
                )));
            }
            let mut data = Vec::new();
            for &k in &picks {
                data.extend_from_slice(frame_of(&all, k)?.data());
            }
            let mut shape = all.shape().to_vec();
            shape[0] = frames;
            let refs = ref_frames.iter().map(|&k| frame_of(&all, k)).collect::<Result<_>>()?;
            (Tensor::new(&shape, data)?, refs)
        }
        (None, Some(id)) => (
            synth::render_clip(id, &frame_poses, size),
            reference_poses.iter().map(|p| synth::render_head(id, p, size)).collect(),
        ),
        (None, None) => {
            return Err(Error::InvalidArgument(format!(
                "clip {} has neither an identity nor a video path",
                record.clip_id
            )))
        }
    };
    Ok(TrainingExample {
        video,
        fps: record.fps,
        references,
        reference_poses,
        frame_poses,
        prompt: record.caption.clone().unwrap_or_else(|| DEFAULT_PROMPT.to_string()),
    })
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let records = datapipe::read_manifest(&a.manifest)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no clips", a.manifest.display())));
    }
    let model_cfg = cfg.model_config();
    let enc_cfg = cfg.encoder_config();
    let encoder = PatchEncoder::new(enc_cfg.clone())?;
    let examples = records
        .iter()
        .map(|r| example_from_record(r, &model_cfg, &enc_cfg, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(model_cfg)?;
    let tcfg = cfg.train_config(a.steps, a.lr, a.batch_size);
    let curve = flow::train(&mut model, &encoder, &examples, &tcfg, |_, _| {})?;
    model.save(&a.out)?;
    std::fs::write(a.out.join("encoder.json"), serde_json::to_string_pretty(&enc_cfg)?)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.join("loss.csv"));
    flow::write_loss_csv(&csv, &curve)?;
    let last = curve.last().map_or(f64::NAN, |c| c.1);
    println!("trained {} steps on {} clips, final loss {last:.6}", curve.len(), examples.len());
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(Model, PatchEncoder)> {
    let model = Model::load(dir)?;
    let enc_path = dir.join("encoder.json");
    let enc_cfg = if enc_path.is_file() {
        serde_json::from_str(&std::fs::read_to_string(enc_path)?)?
    } else {
        EncoderConfig {
            latent_dim: model.config.latent_dim,
            ..EncoderConfig::default()
        }
    };
    Ok((model, PatchEncoder::new(enc_cfg)?))
}

/// Identity, reference poses and (when known) per-frame poses of the clip
/// to generate.
struct Conditioning {
    identity: u64,
    reference_poses: Vec<PoseAngles>,
    frame_poses: Option<Vec<PoseAngles>>,
    prompt: String,
}

fn resolve_conditioning(c: &ConditionArgs, model: &Model, enc: &EncoderConfig, seed: u64) -> Result<Conditioning> {
    let n = model.config.num_refs;
    if let Some(path) = &c.manifest {
        let records = datapipe::read_manifest(path)?;
        let record = match &c.clip {
            Some(id) => records.iter().find(|r| &r.clip_id == id),
            None => records.first(),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("no matching clip in {}", path.display())))?;
        let identity = record
            .identity
            .ok_or_else(|| Error::InvalidArgument(format!("clip {} has no identity", record.clip_id)))?;
        let ex = example_from_record(record, &model.config, enc, seed)?;
        return Ok(Conditioning {
            identity,
            reference_poses: ex.reference_poses,
            frame_poses: Some(ex.frame_poses),
            prompt: record.caption.clone().unwrap_or_else(|| c.prompt.clone()),
        });
    }
    let identity = c.identity.unwrap_or(seed);
    let mut poses = synth::reference_poses(seed);
    poses.truncate(n);
    Ok(Conditioning {
        identity,
        reference_poses: poses,
        frame_poses: None,
        prompt: c.prompt.clone(),
    })
}

/// Views of the identity used as the evaluation reference set: yaw spread
/// over [-75, 75] degrees.
pub fn evaluation_views(count: usize) -> Vec<PoseAngles> {
    (0..count)
        .map(|k| {
            let yaw = if count > 1 { -75.0 + 150.0 * k as f64 / (count - 1) as f64 } else { 0.0 };
            PoseAngles::new(yaw, if k % 2 == 0 { 5.0 } else { -5.0 }, 0.0)
        })
        .collect()
}

fn build_conditions(model: &Model, encoder: &PatchEncoder, cond: &Conditioning) -> Result<SampleConditions> {
    let size = image_size(&model.config, encoder.config());
    let references = cond
        .reference_poses
        .iter()
        .map(|p| encoder.encode_reference(&synth::render_head(cond.identity, p, size), None))
        .collect::<Result<Vec<_>>>()?;
    let view_poses = match (&cond.frame_poses, model.config.masking.view()) {
        (Some(fp), true) => {
            let ct = encoder.config().temporal_compression;
            let anchors = (0..model.config.latent_frames)
                .map(|i| fp[crate::masking::pose_anchor_frame(i, ct).min(fp.len() - 1)])
                .collect();
            Some((anchors, cond.reference_poses.clone()))
        }
        _ => None,
    };
    Ok(SampleConditions {
        references,
        prompt: PromptEmbedding::from_text(&cond.prompt, model.config.prompt_len, model.config.width),
        latent_frames: model.config.latent_frames,
        fps: 16.0,
        view_poses,
    })
}

fn write_pose_jsonl(path: &Path, video: &Tensor) -> Result<usize> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut written = 0;
    for k in 0..video.shape()[0] {
        if let Some(p) = synth::estimate_pose(&frame_of(video, k)?) {
            writeln!(
                f,
                "{}",
                serde_json::json!({"frame": k, "yaw": p.yaw, "pitch": p.pitch, "roll": p.roll})
            )?;
            written += 1;
        }
    }
    f.flush()?;
    Ok(written)
}

/// Generates into `out`: `latents.bin`, `video.bin`, `poses.jsonl` and the
/// evaluation views under `refs/`. Returns the decoded clip.
fn generate(model: &Model, encoder: &PatchEncoder, cond: &ConditionArgs, steps: usize, seed: u64, out: &Path) -> Result<Tensor> {
    let c = resolve_conditioning(cond, model, encoder.config(), seed)?;
    let conditions = build_conditions(model, encoder, &c)?;
    let latents = flow::sample(model, &conditions, steps, seed)?;
    let video = encoder.decode_video(&latents.latents)?;
    std::fs::create_dir_all(out.join("refs"))?;
    write_tensor_file(&out.join("latents.bin"), &latents.latents)?;
    write_tensor_file(&out.join("video.bin"), &video)?;
    write_pose_jsonl(&out.join("poses.jsonl"), &video)?;
    let size = image_size(&model.config, encoder.config());
    for (k, p) in evaluation_views(DEFAULT_REFERENCE_SET_SIZE).iter().enumerate() {
        write_tensor_file(&out.join("refs").join(format!("ref_{k:02}.bin")), &synth::render_head(c.identity, p, size))?;
    }
    Ok(video)
}

fn cmd_sample(cfg: &RunConfig, a: &SampleArgs) -> Result<Tensor> {
    let (model, encoder) = load_checkpoint(&a.checkpoint)?;
    let video = generate(&model, &encoder, &a.cond, a.steps, cfg.seed, &a.out)?;
    println!("wrote {} frames to {}", video.shape()[0], a.out.display());
    Ok(video)
}

fn read_reference_dir(dir: &Path, extractor: &dyn metrics::FaceExtractor) -> Result<ReferenceSet> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    let embeddings = paths
        .iter()
        .map(|p| extractor.extract(&read_tensor_file(p)?))
        .collect::<Result<Vec<_>>>()?;
    ReferenceSet::new(embeddings)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let extractor = extractor_from_spec(&a.extractor)?;
    let (video, refs_dir) = match (&a.video, &a.checkpoint) {
        (Some(v), _) => {
            let refs = a
                .refs
                .clone()
                .ok_or_else(|| Error::InvalidArgument("--video needs --refs".into()))?;
            (read_tensor_file(v)?, refs)
        }
        (None, Some(ckpt)) => {
            let (model, encoder) = load_checkpoint(ckpt)?;
            let video = generate(&model, &encoder, &a.cond, a.steps, cfg.seed, &a.out)?;
            (video, a.refs.clone().unwrap_or_else(|| a.out.join("refs")))
        }
        (None, None) => return Err(Error::InvalidArgument("eval needs --checkpoint or --video".into())),
    };
    let refs = read_reference_dir(&refs_dir, extractor.as_ref())?;
    let report = metrics::mvrc_video(&video, &refs, extractor.as_ref(), a.stride)?;
    std::fs::create_dir_all(&a.out)?;
    report.write_csv(&a.out.join("mvrc.csv"))?;
    println!(
        "mvrc {:.6} over {} frames ({} skipped)",
        report.mean,
        report.per_frame.len(),
        report.skipped.len()
    );
    Ok(())
}

fn cmd_traj(a: &TrajArgs) -> Result<()> {
    let projection: Projection = a.projection.parse()?;
    let poses = trajectory::parse_pose_jsonl(&std::fs::read_to_string(&a.poses)?)?;
    let points = trajectory::build_trajectory(&poses)?;
    let stats = trajectory::trajectory_stats(&points, a.cone, a.min_run)?;
    std::fs::write(&a.out, trajectory::render_trajectory_svg(&points, projection))?;
    if let Some(p) = &a.stats {
        trajectory::write_stats_csv(p, &stats)?;
    }
    println!(
        "{} points, dispersion {:.4}, smoothness {:.4}, {} collapse segments",
        points.len(),
        stats.dispersion,
        stats.smoothness,
        stats.collapse_segments.len()
    );
    Ok(())
}

fn cmd_attn(cfg: &RunConfig, a: &AttnArgs) -> Result<()> {
    let (model, encoder) = load_checkpoint(&a.checkpoint)?;
    let c = resolve_conditioning(&a.cond, &model, encoder.config(), cfg.seed)?;
    let conditions = build_conditions(&model, &encoder, &c)?;
    let seq = crate::flow::probe_sequence(&model, &conditions, a.t, cfg.seed)?;
    let prompt = &conditions.prompt;
    let out = model.forward_with_attention(&seq, a.t, prompt)?;
    let weights = match (a.layer, a.head) {
        (Some(l), Some(h)) => model.attention_weights(&seq, a.t, prompt, l, h)?.weights,
        (None, None) => metrics::mean_weights(&out.attention)?,
        _ => return Err(Error::InvalidArgument("give both --layer and --head, or neither".into())),
    };
    let series = metrics::concentration_from_weights(&weights, &seq.layout)?;
    series.write_csv(&a.out)?;
    if let Some(p) = &a.layout {
        std::fs::write(p, serde_json::to_string_pretty(&seq.layout.summary())?)?;
    }
    println!("mean reference-attention entropy {:.6}", series.mean_entropy());
    Ok(())
}

fn cmd_datapipe(cfg: &RunConfig, a: &DatapipeArgs) -> Result<()> {
    let records = match (&a.input, a.synthetic) {
        (Some(p), None) => datapipe::read_manifest(p)?,
        (None, Some(n)) => datapipe::synthetic_corpus(n, cfg.seed),
        _ => return Err(Error::InvalidArgument("datapipe needs exactly one of --in and --synthetic".into())),
    };
    let pcfg = PipelineConfig {
        quality_threshold: a.quality_threshold,
        min_duration: a.min_duration,
        min_coverage: a.min_coverage,
        num_refs: cfg.num_refs,
        seed: cfg.seed,
        max_attempts: a.max_attempts,
    };
    let (kept, report) = datapipe::run_pipeline(records, &pcfg)?;
    datapipe::write_manifest(&a.out, &kept)?;
    std::fs::write(&a.report, serde_json::to_string_pretty(&report)?)?;
    println!("kept {} clips", kept.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("mvref").chain(s.split_whitespace()).map(String::from).collect()
    }

    #[test]
    fn defaults_filled() {
        let cfg = parse_config(&argv("train --manifest m.jsonl --out ckpt/"), None).unwrap();
        assert_eq!(cfg.scheme, RopeScheme::RdRope);
        assert_eq!(cfg.rm_ratio, 0.6);
        assert_eq!(cfg.num_refs, 3);
        assert_eq!(cfg.masking, MaskingMode::None);
        match cfg.command {
            Command::Train(t) => assert_eq!(t.manifest, PathBuf::from("m.jsonl")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_enum_is_usage_error() {
        let e = parse_config(&argv("train --manifest m --out o --masking bogus"), None).unwrap_err();
        assert!(matches!(e, CliError::Usage(_)));
        let e = parse_config(&argv("train --manifest m"), None).unwrap_err();
        assert!(matches!(e, CliError::Usage(_)));
        let e = parse_config(&argv("train --manifest m --out o --frobnicate 1"), None).unwrap_err();
        assert!(matches!(e, CliError::Usage(_)));
    }

    #[test]
    fn flags_beat_file() {
        let file = "# settings\nrm-ratio = 0.4\nscheme = vanilla\n";
        let cfg = parse_config(&argv("train --manifest m --out o --rm-ratio 0.6"), Some(file)).unwrap();
        assert_eq!(cfg.rm_ratio, 0.6);
        assert_eq!(cfg.scheme, RopeScheme::Vanilla);
        assert!(matches!(
            parse_config(&argv("train --manifest m --out o"), Some("nonsense = 1")),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn ablation_cells_are_expressible() {
        let cells = [
            ("--scheme vanilla --masking none", RopeScheme::Vanilla, MaskingMode::None),
            ("--scheme rdrope --masking none", RopeScheme::RdRope, MaskingMode::None),
            ("--scheme vanilla --masking rm", RopeScheme::Vanilla, MaskingMode::Region),
            ("--scheme rdrope --masking rm", RopeScheme::RdRope, MaskingMode::Region),
        ];
        for (flags, scheme, masking) in cells {
            let cfg = parse_config(&argv(&format!("train --manifest m --out o {flags}")), None).unwrap();
            assert_eq!((cfg.scheme, cfg.masking), (scheme, masking));
            let t = cfg.train_config(10, None, 1);
            assert_eq!((t.scheme, t.masking), (scheme, masking));
        }
    }

    #[test]
    fn vm_renorm_switch() {
        let on = parse_config(&argv("train --manifest m --out o --vm-renorm on"), None).unwrap();
        assert_eq!(on.view_mask_mode, ViewMaskMode::PreSoftmax);
        let off = parse_config(&argv("train --manifest m --out o --vm-renorm off"), None).unwrap();
        assert_eq!(off.view_mask_mode, ViewMaskMode::PostSoftmaxZero);
        assert!(parse_config(&argv("train --manifest m --out o --vm-renorm maybe"), None).is_err());
    }

    #[test]
    fn spread_indices_cover_the_clip() {
        assert_eq!(spread_indices(81, 8), vec![0, 11, 23, 34, 46, 57, 69, 80]);
        assert_eq!(spread_indices(8, 8), (0..8).collect::<Vec<_>>());
    }
}
