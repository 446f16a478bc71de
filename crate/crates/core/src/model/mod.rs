//! Toy reference-conditioned diffusion transformer.

pub mod encoder;
pub mod sequence;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use encoder::{EncoderConfig, LatentOrigin, LatentVideo, PatchEncoder, ReferenceLatent};
pub use sequence::{concat_sequence, PromptEmbedding, TokenGroup, TokenSequence};

use crate::error::{Error, Result};
use crate::masking::{MaskingMode, ViewMaskMode};
use crate::rope::{rope_tables, AxisLayout, RopeConfig, RopeScheme};
use crate::tensor::{read_tensor_file, softmax, write_tensor_file, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub latent_frames: usize,
    pub num_refs: usize,
    pub prompt_len: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
    pub rope_layout: AxisLayout,
    pub temporal_offset: u32,
    pub scheme: RopeScheme,
    pub masking: MaskingMode,
    pub view_mask_mode: ViewMaskMode,
    /// Scale and shift of the normalised video activations predicted from
    /// the time embedding, on top of the additive time embedding.
    pub time_modulation: bool,
    /// Learned absolute embedding per video token, added after the input
    /// projection. Ties the model to `latent_frames` frames.
    pub position_table: bool,
    /// Standard deviation multiplier of the output projection at init.
    pub out_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 4,
            latent_dim: 16,
            grid_h: 8,
            grid_w: 8,
            latent_frames: 2,
            num_refs: 3,
            prompt_len: PromptEmbedding::DEFAULT_LEN,
            ffn_mult: 2,
            rope_base: 10_000.0,
            rope_layout: AxisLayout::Blocked,
            temporal_offset: 1,
            scheme: RopeScheme::RdRope,
            masking: MaskingMode::None,
            view_mask_mode: ViewMaskMode::PreSoftmax,
            time_modulation: false,
            position_table: false,
            out_init: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("latent_dim", self.latent_dim),
            ("prompt_len", self.prompt_len),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model {name} must be positive")));
        }
        if self.width % self.heads != 0 || self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "width {} must split into {} heads of even size",
                self.width, self.heads
            )));
        }
        self.rope_config()?;
        Ok(())
    }

    pub fn rope_config(&self) -> Result<RopeConfig> {
        let cfg = RopeConfig::new(self.head_dim(), self.grid_h, self.grid_w, self.num_refs)?
            .with_base(self.rope_base)
            .with_layout(self.rope_layout)
            .with_temporal_offset(self.temporal_offset);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Post-softmax weights of one layer/head with the rotated queries and keys
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[video tokens, latent_dim]`
    pub velocity: Tensor,
    pub attention: Vec<AttentionMap>,
}

pub(crate) struct Built {
    pub out: Var,
    maps: Vec<(usize, usize, Var, Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// `[1, dim]` sinusoidal embedding of `t`.
pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(k as f64) * (1000f64).ln() / half.max(1) as f64).exp();
        let arg = 1000.0 * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Tensor::new(&[1, dim], out).expect("time embedding")
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        let (d, dl, f) = (config.width, config.latent_dim, config.width * config.ffn_mult);
        let mut weight = |rows: usize, cols: usize, gain: f64| {
            let dist = Normal::new(0.0, gain / (rows as f64).sqrt()).expect("init std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(&[rows, cols], data).expect("init shape")
        };
        params.push("in.w".into(), weight(dl, d, 1.0));
        params.push("in.b".into(), Tensor::zeros(&[1, d]));
        if config.position_table {
            let nv = config.latent_frames * config.grid_h * config.grid_w;
            params.push("pos.video".into(), Tensor::zeros(&[nv, d]));
        }
        params.push("time.w1".into(), weight(d, d, 1.0));
        params.push("time.b1".into(), Tensor::zeros(&[1, d]));
        params.push("time.w2".into(), weight(d, d, 1.0));
        params.push("time.b2".into(), Tensor::zeros(&[1, d]));
        for l in 0..config.layers {
            for name in ["wq", "wk", "wv", "wo", "cq", "ck", "cv", "co"] {
                params.push(format!("blk{l}.{name}"), weight(d, d, 1.0));
            }
            params.push(format!("blk{l}.ff1"), weight(d, f, 1.0));
            params.push(format!("blk{l}.ff1b"), Tensor::zeros(&[1, f]));
            params.push(format!("blk{l}.ff2"), weight(f, d, 1.0));
            params.push(format!("blk{l}.ff2b"), Tensor::zeros(&[1, d]));
            if config.time_modulation {
                params.push(format!("blk{l}.mod.w"), weight(d, 4 * d, 0.1));
                params.push(format!("blk{l}.mod.b"), Tensor::zeros(&[1, 4 * d]));
            }
        }
        if config.time_modulation {
            params.push("out.mod.w".into(), weight(d, 2 * d, 0.1));
            params.push("out.mod.b".into(), Tensor::zeros(&[1, 2 * d]));
        }
        params.push("out.w".into(), weight(d, dl, config.out_init));
        params.push("out.b".into(), Tensor::zeros(&[1, dl]));
        Ok(Self { config, params })
    }

    pub fn rope_config(&self) -> Result<RopeConfig> {
        self.config.rope_config()
    }

    fn check_inputs(&self, seq: &TokenSequence, t: f64, prompt: &PromptEmbedding) -> Result<()> {
        seq.validate()?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        if seq.latent_dim() != self.config.latent_dim {
            return Err(Error::shape("forward", seq.tokens.shape(), &[self.config.latent_dim]));
        }
        if seq.layout.grid_h != self.config.grid_h || seq.layout.grid_w != self.config.grid_w {
            return Err(Error::shape(
                "forward",
                &[seq.layout.grid_h, seq.layout.grid_w],
                &[self.config.grid_h, self.config.grid_w],
            ));
        }
        if prompt.dim() != self.config.width {
            return Err(Error::shape("forward", prompt.rows.shape(), &[self.config.width]));
        }
        let c = &self.config;
        if c.position_table && seq.num_video_tokens() != c.latent_frames * c.grid_h * c.grid_w {
            return Err(Error::shape(
                "forward",
                &[seq.num_video_tokens()],
                &[c.latent_frames * c.grid_h * c.grid_w],
            ));
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, as gradient-tracking leaves when
    /// `track` is set.
    pub(crate) fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|p| {
                if track {
                    tape.leaf(p.clone().with_requires_grad(true))
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass. `tokens` is `[L, latent_dim]` on the tape.
    pub(crate) fn build(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        seq: &TokenSequence,
        tokens: Var,
        t: f64,
        prompt: &PromptEmbedding,
        capture: bool,
    ) -> Result<Built> {
        let p = |name: &str| vars[self.params.index[name]];
        let cfg = &self.config;
        let (d, dh) = (cfg.width, cfg.head_dim());
        let n = seq.len();
        let nv = seq.num_video_tokens();
        let rope = self.rope_config()?;
        let (cos, sin) = rope_tables(seq.layout.coordinates(), &rope);

        let (additive, keep) = match (&seq.view_mask, cfg.view_mask_mode) {
            (None, _) => (None, None),
            (Some(m), ViewMaskMode::PreSoftmax) => (Some(tape.constant(m.additive(&seq.layout)?)), None),
            (Some(m), ViewMaskMode::PostSoftmaxZero) => (None, Some(tape.constant(m.keep(&seq.layout)?))),
        };
        let mut indicator = vec![0.0; n];
        indicator[..nv].iter_mut().for_each(|v| *v = 1.0);
        let indicator = tape.constant(Tensor::new(&[n, 1], indicator)?);

        let temb = tape.constant(time_embedding(t, d));
        let h = tape.matmul(temb, p("time.w1"))?;
        let h = tape.add(h, p("time.b1"))?;
        let h = tape.silu(h);
        let h = tape.matmul(h, p("time.w2"))?;
        let tvec = tape.add(h, p("time.b2"))?;
        let tcond = tape.matmul(indicator, tvec)?;

        // video rows only: xn * (1 + scale) + shift
        let modulate = |tape: &mut Tape, xn: Var, m: Var, at: usize| -> Result<Var> {
            let shift = tape.slice_cols(m, at * d, d)?;
            let scale = tape.slice_cols(m, (at + 1) * d, d)?;
            let shift = tape.matmul(indicator, shift)?;
            let scale = tape.matmul(indicator, scale)?;
            let scaled = tape.mul(xn, scale)?;
            let y = tape.add(xn, scaled)?;
            tape.add(y, shift)
        };

        let prompt_rows = tape.constant(prompt.rows.clone());
        let x = tape.matmul(tokens, p("in.w"))?;
        let mut x = tape.add_row(x, p("in.b"))?;
        if cfg.position_table {
            let mut select = Tensor::zeros(&[n, nv]);
            (0..nv).for_each(|i| select.data_mut()[i * nv + i] = 1.0);
            let select = tape.constant(select);
            let pos = tape.matmul(select, p("pos.video"))?;
            x = tape.add(x, pos)?;
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut maps = Vec::new();
        for l in 0..cfg.layers {
            let w = |name: &str| p(&format!("blk{l}.{name}"));
            x = tape.add(x, tcond)?;
            let modv = if cfg.time_modulation {
                let m = tape.matmul(tvec, w("mod.w"))?;
                Some(tape.add(m, w("mod.b"))?)
            } else {
                None
            };

            let mut xn = tape.rms_norm_rows(x, NORM_EPS)?;
            if let Some(m) = modv {
                xn = modulate(tape, xn, m, 0)?;
            }
            let q = tape.matmul(xn, w("wq"))?;
            let k = tape.matmul(xn, w("wk"))?;
            let v = tape.matmul(xn, w("wv"))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let qh = tape.rope(qh, cos.clone(), sin.clone())?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let kh = tape.rope(kh, cos.clone(), sin.clone())?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let mut s = tape.scale(s, scale);
                if let Some(m) = additive {
                    s = tape.add(s, m)?;
                }
                let mut a = tape.softmax_rows(s)?;
                if let Some(m) = keep {
                    a = tape.mul(a, m)?;
                }
                if capture {
                    maps.push((l, hd, a, qh, kh));
                }
                heads.push(tape.matmul(a, vh)?);
            }
            let o = tape.concat_cols(&heads)?;
            let o = tape.matmul(o, w("wo"))?;
            x = tape.add(x, o)?;

            let xn = tape.rms_norm_rows(x, NORM_EPS)?;
            let cq = tape.matmul(xn, w("cq"))?;
            let ck = tape.matmul(prompt_rows, w("ck"))?;
            let cv = tape.matmul(prompt_rows, w("cv"))?;
            let ckt = tape.transpose(ck)?;
            let s = tape.matmul(cq, ckt)?;
            let s = tape.scale(s, 1.0 / (d as f64).sqrt());
            let a = tape.softmax_rows(s)?;
            let c = tape.matmul(a, cv)?;
            let c = tape.matmul(c, w("co"))?;
            x = tape.add(x, c)?;

            let mut xn = tape.rms_norm_rows(x, NORM_EPS)?;
            if let Some(m) = modv {
                xn = modulate(tape, xn, m, 2)?;
            }
            let hf = tape.matmul(xn, w("ff1"))?;
            let hf = tape.add_row(hf, w("ff1b"))?;
            let hf = tape.silu(hf);
            let hf = tape.matmul(hf, w("ff2"))?;
            let hf = tape.add_row(hf, w("ff2b"))?;
            x = tape.add(x, hf)?;
        }
        let xv = tape.slice_rows(x, 0, nv)?;
        let mut xv = tape.rms_norm_rows(xv, NORM_EPS)?;
        if cfg.time_modulation {
            let m = tape.matmul(tvec, p("out.mod.w"))?;
            let m = tape.add(m, p("out.mod.b"))?;
            let shift = tape.slice_cols(m, 0, d)?;
            let scale = tape.slice_cols(m, d, d)?;
            let scaled = tape.mul_row(xv, scale)?;
            xv = tape.add(xv, scaled)?;
            xv = tape.add_row(xv, shift)?;
        }
        let out = tape.matmul(xv, p("out.w"))?;
        let out = tape.add_row(out, p("out.b"))?;
        Ok(Built { out, maps })
    }

    fn run(&self, seq: &TokenSequence, t: f64, prompt: &PromptEmbedding, capture: bool) -> Result<ForwardOutput> {
        self.check_inputs(seq, t, prompt)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let tokens = tape.constant(seq.tokens.clone());
        let built = self.build(&mut tape, &vars, seq, tokens, t, prompt, capture)?;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let attention = built
            .maps
            .iter()
            .map(|&(layer, head, a, q, k)| AttentionMap {
                layer,
                head,
                weights: tape.value(a).clone(),
                q: tape.value(q).clone(),
                k: tape.value(k).clone(),
                scale,
            })
            .collect();
        Ok(ForwardOutput {
            velocity: tape.value(built.out).clone(),
            attention,
        })
    }

    /// Velocity prediction over the video tokens, `[video tokens, latent_dim]`.
    pub fn forward(&self, seq: &TokenSequence, t: f64, prompt: &PromptEmbedding) -> Result<Tensor> {
        Ok(self.run(seq, t, prompt, false)?.velocity)
    }

    /// Mean squared error of the velocity prediction against `target` and its
    /// gradient for every parameter, in [`Params`] order.
    pub fn loss_and_grads(
        &self,
        seq: &TokenSequence,
        t: f64,
        prompt: &PromptEmbedding,
        target: &Tensor,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let tokens = tape.constant(seq.tokens.clone());
        let built = self.build(&mut tape, &vars, seq, tokens, t, prompt, false)?;
        let target = tape.constant(target.clone());
        let loss = tape.mse(built.out, target)?;
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect();
        Ok((tape.value(loss).item(), grads))
    }

    /// Forward pass that also returns every layer/head attention map.
    pub fn forward_with_attention(
        &self,
        seq: &TokenSequence,
        t: f64,
        prompt: &PromptEmbedding,
    ) -> Result<ForwardOutput> {
        self.run(seq, t, prompt, true)
    }

    pub fn attention_weights(
        &self,
        seq: &TokenSequence,
        t: f64,
        prompt: &PromptEmbedding,
        layer: usize,
        head: usize,
    ) -> Result<AttentionMap> {
        if layer >= self.config.layers || head >= self.config.heads {
            return Err(Error::InvalidArgument(format!(
                "attention ({layer}, {head}) outside {} layers x {} heads",
                self.config.layers, self.config.heads
            )));
        }
        let out = self.forward_with_attention(seq, t, prompt)?;
        Ok(out
            .attention
            .into_iter()
            .find(|m| m.layer == layer && m.head == head)
            .expect("captured map"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("params"))?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            write_tensor_file(&dir.join("params").join(format!("{name}.bin")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        if !cfg_path.is_file() {
            return Err(Error::CheckpointNotFound(dir.display().to_string()));
        }
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(cfg_path)?)?;
        let mut model = Model::new(config)?;
        for i in 0..model.params.len() {
            let path = dir.join("params").join(format!("{}.bin", model.params.names[i]));
            let t = read_tensor_file(&path)?;
            if t.shape() != model.params.tensors[i].shape() {
                return Err(Error::shape("checkpoint", t.shape(), model.params.tensors[i].shape()));
            }
            model.params.tensors[i] = t;
        }
        Ok(model)
    }
}

impl AttentionMap {
    /// Recomputes the weights from the cached rotated queries and keys.
    pub fn recompute(&self, seq: &TokenSequence, mode: ViewMaskMode) -> Result<Tensor> {
        let mut s = crate::tensor::matmul(&self.q, &self.k.transpose()?)?.map(|v| v * self.scale);
        match (&seq.view_mask, mode) {
            (None, _) => softmax(&s, 1),
            (Some(m), ViewMaskMode::PreSoftmax) => {
                s = s.zip_map(&m.additive(&seq.layout)?, |a, b| a + b)?;
                softmax(&s, 1)
            }
            (Some(m), ViewMaskMode::PostSoftmaxZero) => softmax(&s, 1)?.zip_map(&m.keep(&seq.layout)?, |a, b| a * b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::ViewAttentionMask;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 6,
            width: 16,
            heads: 2,
            grid_h: 3,
            grid_w: 3,
            ..ModelConfig::default()
        }
    }

    fn random_sequence(cfg: &ModelConfig, frames: usize, n: usize, scheme: RopeScheme, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, d) = (cfg.grid_h * cfg.grid_w, cfg.latent_dim);
        let mut r = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let video = LatentVideo {
            latents: Tensor::new(&[frames, cfg.grid_h, cfg.grid_w, d], r(frames * g * d)).unwrap(),
            fps: 16.0,
            source_frames: frames * 4,
        };
        let refs: Vec<_> = (0..n)
            .map(|_| ReferenceLatent {
                latents: Tensor::new(&[cfg.grid_h, cfg.grid_w, d], r(g * d)).unwrap(),
                origin: LatentOrigin::Clean,
            })
            .collect();
        let rope = RopeConfig::new(cfg.head_dim(), cfg.grid_h, cfg.grid_w, n).unwrap();
        concat_sequence(&video, &refs, scheme, &rope).unwrap()
    }

    #[test]
    fn output_matches_video_shape() {
        for scheme in RopeScheme::ALL {
            for n in 1..=3 {
                for frames in [1, 2, 3] {
                    let cfg = ModelConfig { num_refs: n, ..small_config() };
                    let m = Model::new(cfg.clone()).unwrap();
                    let seq = random_sequence(&cfg, frames, n, scheme, 1);
                    let prompt = PromptEmbedding::from_text("x", 4, cfg.width);
                    let v = m.forward(&seq, 0.3, &prompt).unwrap();
                    assert_eq!(v.shape(), &[frames * 9, 6]);
                    assert!(v.is_finite());
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let seq = random_sequence(&cfg, 2, 3, RopeScheme::RdRope, 4);
        let prompt = PromptEmbedding::from_text("p", 4, cfg.width);
        let a = Model::new(cfg.clone()).unwrap().forward(&seq, 0.5, &prompt).unwrap();
        let b = Model::new(cfg).unwrap().forward(&seq, 0.5, &prompt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_config();
        let m = Model::new(cfg.clone()).unwrap();
        let seq = random_sequence(&cfg, 2, 3, RopeScheme::RdRope, 4);
        let prompt = PromptEmbedding::from_text("p", 4, cfg.width);
        assert!(m.forward(&seq, 1.5, &prompt).is_err());
        assert!(m.forward(&seq, 0.5, &PromptEmbedding::from_text("p", 4, 8)).is_err());
        assert!(m.attention_weights(&seq, 0.5, &prompt, 2, 0).is_err());
        assert!(m.attention_weights(&seq, 0.5, &prompt, 0, 2).is_err());
        let mut broken = seq.clone();
        broken.tokens = Tensor::zeros(&[5, 6]);
        assert!(m.forward(&broken, 0.5, &prompt).is_err());
        assert!(Model::new(ModelConfig { heads: 3, ..cfg }).is_err());
    }

    #[test]
    fn view_mask_zeroes_blocked_weights() {
        for mode in [ViewMaskMode::PreSoftmax, ViewMaskMode::PostSoftmaxZero] {
            let cfg = ModelConfig {
                view_mask_mode: mode,
                ..small_config()
            };
            let m = Model::new(cfg.clone()).unwrap();
            let seq = random_sequence(&cfg, 2, 3, RopeScheme::RdRope, 2)
                .with_view_mask(ViewAttentionMask {
                    num_refs: 3,
                    matched: vec![2, 0],
                })
                .unwrap();
            let prompt = PromptEmbedding::from_text("p", 4, cfg.width);
            let out = m.forward_with_attention(&seq, 0.7, &prompt).unwrap();
            assert_eq!(out.attention.len(), cfg.layers * cfg.heads);
            let mask = seq.view_mask.as_ref().unwrap();
            for map in &out.attention {
                let n = seq.len();
                for q in 0..n {
                    let row = map.weights.row(q);
                    for (k, &w) in row.iter().enumerate() {
                        if mask.token_blocked(&seq.layout, q, k) {
                            assert_eq!(w, 0.0);
                        }
                    }
                    if mode == ViewMaskMode::PreSoftmax {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
                let again = map.recompute(&seq, mode).unwrap();
                let err = again
                    .data()
                    .iter()
                    .zip(map.weights.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-12);
            }
        }
    }

    #[test]
    fn reference_order_is_irrelevant_when_coordinates_follow() {
        let cfg = small_config();
        let m = Model::new(cfg.clone()).unwrap();
        let seq = random_sequence(&cfg, 2, 3, RopeScheme::Vanilla, 8);
        let prompt = PromptEmbedding::from_text("p", 4, cfg.width);
        let perm = [2, 0, 1];
        let mut swapped = seq.clone();
        let d = cfg.latent_dim;
        let mut data = seq.video_tokens().into_data();
        for &j in &perm {
            for tok in seq.layout.ref_range(j) {
                data.extend_from_slice(&seq.tokens.data()[tok * d..(tok + 1) * d]);
            }
        }
        swapped.tokens = Tensor::new(seq.tokens.shape(), data).unwrap();
        swapped.layout.refs = perm.iter().map(|&j| seq.layout.refs[j].clone()).collect();
        let a = m.forward(&seq, 0.4, &prompt).unwrap();
        let b = m.forward(&swapped, 0.4, &prompt).unwrap();
        let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let cfg = small_config();
        let m = Model::new(cfg.clone()).unwrap();
        let seq = random_sequence(&cfg, 2, 2, RopeScheme::RdRope, 3);
        let prompt = PromptEmbedding::from_text("p", 4, cfg.width);
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        let tokens = tape.constant(seq.tokens.clone());
        let built = m.build(&mut tape, &vars, &seq, tokens, 0.6, &prompt, false).unwrap();
        let target = tape.constant(Tensor::filled(tape.value(built.out).shape(), 0.3));
        let loss = tape.mse(built.out, target).unwrap();
        tape.backward(loss).unwrap();
        for (name, v) in m.params.names().iter().zip(&vars) {
            let g = tape.grad(*v).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().all(|x| x.is_finite()), "{name}");
            assert!(g.iter().any(|&x| x != 0.0), "{name} gradient is identically zero");
        }
    }

    #[test]
    fn optional_blocks_match_finite_differences() {
        let cfg = ModelConfig {
            time_modulation: true,
            position_table: true,
            rope_layout: AxisLayout::Interleaved,
            ..small_config()
        };
        let mut m = Model::new(cfg.clone()).unwrap();
        let seq = random_sequence(&cfg, 2, 2, RopeScheme::RdRope, 4);
        let prompt = PromptEmbedding::from_text("p", 4, cfg.width);
        let target = Tensor::filled(&[seq.num_video_tokens(), cfg.latent_dim], 0.2);
        let (_, grads) = m.loss_and_grads(&seq, 0.4, &prompt, &target).unwrap();
        let h = 1e-5;
        for (p, name) in m.params.names().to_vec().iter().enumerate() {
            if !(name.contains("mod") || name.starts_with("pos")) {
                continue;
            }
            for flat in [0, m.params.tensors()[p].numel() - 1] {
                let orig = m.params.tensors()[p].data()[flat];
                let mut at = |v: f64| {
                    m.params.tensors_mut()[p].data_mut()[flat] = v;
                    crate::flow::flow_loss(&m.forward(&seq, 0.4, &prompt).unwrap(), &target).unwrap()
                };
                let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
                at(orig);
                let analytic = grads[p][flat];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{flat}]: {analytic} vs {numeric}");
            }
        }
        let three = random_sequence(&cfg, 3, 2, RopeScheme::RdRope, 4);
        assert!(m.forward(&three, 0.4, &prompt).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config();
        let m = Model::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, cfg);
        assert!(matches!(
            Model::load(&dir.path().join("missing")),
            Err(Error::CheckpointNotFound(_))
        ));
    }
}
