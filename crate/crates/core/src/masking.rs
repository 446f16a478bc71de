//! Region masking of reference images and pose-matched view masking of
//! attention.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::SequenceLayout;
use crate::tensor::Tensor;

pub const DEFAULT_RM_RATIO: f64 = 0.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskingMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "rm")]
    Region,
    #[serde(rename = "vm")]
    View,
    #[serde(rename = "rm+vm")]
    RegionAndView,
}

impl MaskingMode {
    pub const ALL: [MaskingMode; 4] = [
        MaskingMode::None,
        MaskingMode::Region,
        MaskingMode::View,
        MaskingMode::RegionAndView,
    ];

    pub fn region(self) -> bool {
        matches!(self, MaskingMode::Region | MaskingMode::RegionAndView)
    }

    pub fn view(self) -> bool {
        matches!(self, MaskingMode::View | MaskingMode::RegionAndView)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            MaskingMode::None => "none",
            MaskingMode::Region => "rm",
            MaskingMode::View => "vm",
            MaskingMode::RegionAndView => "rm+vm",
        }
    }
}

impl std::str::FromStr for MaskingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskingMode::None),
            "rm" => Ok(MaskingMode::Region),
            "vm" => Ok(MaskingMode::View),
            "rm+vm" | "vm+rm" => Ok(MaskingMode::RegionAndView),
            other => Err(Error::Config(format!("unknown masking mode {other:?}"))),
        }
    }
}

/// How a view mask reaches the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMaskMode {
    /// `-inf` logits before softmax; rows stay normalised.
    #[default]
    PreSoftmax,
    /// Blocked weights zeroed after softmax with no renormalisation.
    PostSoftmaxZero,
}

/// Binary keep-map over an image: 1 keeps the pixel, 0 erases it.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
    pub ratio: f64,
}

impl RegionMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
            ratio: 0.0,
        }
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn keep(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    /// `"{h}x{w};{ratio};{runs}"` where runs alternate starting with ones.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = 1u8;
        let mut count = 0usize;
        for &b in &self.bits {
            if b == current {
                count += 1;
            } else {
                runs.push(count);
                current = b;
                count = 1;
            }
        }
        runs.push(count);
        let runs: Vec<String> = runs.iter().map(usize::to_string).collect();
        format!("{}x{};{};{}", self.height, self.width, self.ratio, runs.join(","))
    }

    pub fn from_rle(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("bad mask rle {s:?}: {why}"));
        let mut parts = s.split(';');
        let dims = parts.next().ok_or_else(|| bad("missing dims"))?;
        let (h, w) = dims.split_once('x').ok_or_else(|| bad("dims"))?;
        let height: usize = h.parse().map_err(|_| bad("height"))?;
        let width: usize = w.parse().map_err(|_| bad("width"))?;
        let ratio: f64 = parts
            .next()
            .ok_or_else(|| bad("missing ratio"))?
            .parse()
            .map_err(|_| bad("ratio"))?;
        let runs = parts.next().ok_or_else(|| bad("missing runs"))?;
        let mut bits = Vec::with_capacity(height * width);
        let mut value = 1u8;
        for r in runs.split(',') {
            let n: usize = r.parse().map_err(|_| bad("run"))?;
            bits.extend(std::iter::repeat_n(value, n));
            value ^= 1;
        }
        if bits.len() != height * width {
            return Err(bad("run total does not match dims"));
        }
        Ok(Self {
            height,
            width,
            bits,
            ratio,
        })
    }
}

/// Exactly `round(ratio * h * w)` cells set to 0, drawn without replacement.
pub fn generate_region_mask(height: usize, width: usize, ratio: f64, seed: u64) -> Result<RegionMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio must be in [0, 1], got {ratio}")));
    }
    let n = height * width;
    let zeros = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![1u8; n];
    for i in index::sample(&mut rng, n, zeros) {
        bits[i] = 0;
    }
    Ok(RegionMask {
        height,
        width,
        bits,
        ratio,
    })
}

/// Elementwise product of an `[H, W]` or `[H, W, C]` image with the mask,
/// broadcast over channels.
pub fn apply_region_mask(image: &Tensor, mask: &RegionMask) -> Result<Tensor> {
    let shape = image.shape();
    let channels = match shape {
        [h, w] if (*h, *w) == (mask.height, mask.width) => 1,
        [h, w, c] if (*h, *w) == (mask.height, mask.width) => *c,
        _ => return Err(Error::shape("apply_region_mask", shape, &[mask.height, mask.width])),
    };
    let mut out = image.clone().with_requires_grad(false);
    for (i, px) in out.data_mut().chunks_mut(channels).enumerate() {
        if mask.bits[i] == 0 {
            px.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub yaw: f64,
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
}

impl PoseAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("yaw", self.yaw), ("pitch", self.pitch), ("roll", self.roll)] {
            if !(-180.0..=180.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [-180, 180]")));
            }
        }
        Ok(())
    }

    /// Euclidean distance over yaw and pitch; roll does not change facing.
    pub fn distance(&self, other: &PoseAngles) -> f64 {
        (self.yaw - other.yaw).hypot(self.pitch - other.pitch)
    }
}

/// First source frame of latent `i` when `c` frames share one latent.
pub fn pose_anchor_frame(latent_index: usize, temporal_compression: usize) -> usize {
    latent_index * temporal_compression
}

/// Index of the reference whose pose is closest to `anchor`; ties go to the
/// lowest index.
pub fn match_reference_view(anchor: &PoseAngles, refs: &[PoseAngles]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, r) in refs.iter().enumerate() {
        let d = anchor.distance(r);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
        .ok_or_else(|| Error::InvalidArgument("no reference poses to match".into()))
}

/// One blocked reference per video latent: tokens of latent `i` may not
/// attend to tokens of reference `matched[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewAttentionMask {
    pub num_refs: usize,
    pub matched: Vec<usize>,
}

impl ViewAttentionMask {
    pub fn num_latents(&self) -> usize {
        self.matched.len()
    }

    pub fn is_blocked(&self, latent: usize, reference: usize) -> bool {
        self.matched.get(latent) == Some(&reference)
    }

    pub fn blocked_pairs(&self) -> Vec<(usize, usize)> {
        self.matched.iter().copied().enumerate().collect()
    }

    fn check_layout(&self, layout: &SequenceLayout) -> Result<()> {
        if layout.latent_frames != self.matched.len() || layout.num_refs() != self.num_refs {
            return Err(Error::shape(
                "view_mask",
                &[layout.latent_frames, layout.num_refs()],
                &[self.matched.len(), self.num_refs],
            ));
        }
        Ok(())
    }

    /// Whether query token `q` may attend to key token `k`.
    pub fn token_blocked(&self, layout: &SequenceLayout, q: usize, k: usize) -> bool {
        let per = layout.tokens_per_frame();
        if q >= layout.num_video_tokens() || k < layout.num_video_tokens() {
            return false;
        }
        let j = self.matched[q / per];
        layout.ref_range(j).contains(&k)
    }

    /// Token-level `[L, L]` additive mask: `-inf` where blocked, else 0.
    pub fn additive(&self, layout: &SequenceLayout) -> Result<Tensor> {
        self.token_grid(layout, f64::NEG_INFINITY, 0.0)
    }

    /// Token-level `[L, L]` keep mask: 0 where blocked, else 1.
    pub fn keep(&self, layout: &SequenceLayout) -> Result<Tensor> {
        self.token_grid(layout, 0.0, 1.0)
    }

    fn token_grid(&self, layout: &SequenceLayout, blocked: f64, open: f64) -> Result<Tensor> {
        self.check_layout(layout)?;
        let n = layout.len();
        let mut data = vec![open; n * n];
        for (i, &j) in self.matched.iter().enumerate() {
            for q in layout.latent_range(i) {
                for k in layout.ref_range(j) {
                    data[q * n + k] = blocked;
                }
            }
        }
        Tensor::new(&[n, n], data)
    }
}

pub fn build_view_attention_mask(
    layout: &SequenceLayout,
    anchor_poses: &[PoseAngles],
    ref_poses: &[PoseAngles],
) -> Result<ViewAttentionMask> {
    if anchor_poses.len() != layout.latent_frames {
        return Err(Error::InvalidArgument(format!(
            "{} anchor poses for {} video latents",
            anchor_poses.len(),
            layout.latent_frames
        )));
    }
    if ref_poses.len() != layout.num_refs() {
        return Err(Error::InvalidArgument(format!(
            "{} reference poses for {} reference blocks",
            ref_poses.len(),
            layout.num_refs()
        )));
    }
    let matched = anchor_poses
        .iter()
        .map(|a| match_reference_view(a, ref_poses))
        .collect::<Result<_>>()?;
    Ok(ViewAttentionMask {
        num_refs: ref_poses.len(),
        matched,
    })
}
