//! 3-D rotary position encoding for video and reference tokens.
//!
//! Each head vector is split into `head_dim / 2` two-dimensional subspaces.
//! Subspace `m` rotates with frequency `base^(-2m/head_dim)` and is tied to
//! one positional axis (frame, height or width). Three coordinate schemes
//! decide where reference tokens sit relative to the video grid:
//!
//! * `Vanilla`: reference `i` (1-based) gets frame `f_last + i`, spatial
//!   coordinates copied from the video grid.
//! * `TemporalOffset`: every reference gets frame `f_last + o_t`.
//! * `RdRope`: every reference gets frame `f_last + o_t` and is moved to its
//!   own spatial block `(h + i*H, w + i*W)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_REFS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeScheme {
    Vanilla,
    TemporalOffset,
    RdRope,
}

impl RopeScheme {
    pub const ALL: [RopeScheme; 3] = [RopeScheme::Vanilla, RopeScheme::TemporalOffset, RopeScheme::RdRope];

    /// Short CLI spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            RopeScheme::Vanilla => "vanilla",
            RopeScheme::TemporalOffset => "toffset",
            RopeScheme::RdRope => "rdrope",
        }
    }
}

impl std::str::FromStr for RopeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(RopeScheme::Vanilla),
            "toffset" | "temporal_offset" => Ok(RopeScheme::TemporalOffset),
            "rdrope" | "rd_rope" => Ok(RopeScheme::RdRope),
            other => Err(Error::Config(format!("unknown rope scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Frame,
    Height,
    Width,
}

/// How the `head_dim/2` subspaces are dealt out to the three axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisLayout {
    /// Contiguous frame, height, width blocks; remainder to frame.
    #[default]
    Blocked,
    /// Subspace `m` goes to frame, height, width for `m % 3 = 0, 1, 2`.
    Interleaved,
}

impl std::str::FromStr for AxisLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blocked" => Ok(Self::Blocked),
            "interleaved" => Ok(Self::Interleaved),
            other => Err(Error::Config(format!("unknown axis layout {other:?}; use blocked or interleaved"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RopeCoordinate {
    pub f: u32,
    pub h: u32,
    pub w: u32,
}

impl RopeCoordinate {
    pub fn new(f: u32, h: u32, w: u32) -> Self {
        Self { f, h, w }
    }

    pub fn along(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Frame => self.f as f64,
            Axis::Height => self.h as f64,
            Axis::Width => self.w as f64,
        }
    }

    pub fn shifted(&self, s: u32) -> Self {
        Self::new(self.f + s, self.h + s, self.w + s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Axis owning each two-dimensional subspace, in subspace order.
    pub subspace_axes: Vec<Axis>,
    pub temporal_offset: u32,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_refs: usize,
}

impl RopeConfig {
    /// Default allocation: the `head_dim/2` subspaces are split as evenly as
    /// possible into frame, height and width sets (in that order), with the
    /// remainder going to the frame set.
    pub fn new(head_dim: usize, grid_h: usize, grid_w: usize, num_refs: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim must be even and positive, got {head_dim}")));
        }
        let pairs = head_dim / 2;
        let each = pairs / 3;
        let frame = each + pairs % 3;
        Self::with_axis_sizes(head_dim, [frame, each, each], grid_h, grid_w, num_refs)
    }

    pub fn with_axis_sizes(
        head_dim: usize,
        sizes: [usize; 3],
        grid_h: usize,
        grid_w: usize,
        num_refs: usize,
    ) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim must be even and positive, got {head_dim}")));
        }
        if sizes.iter().sum::<usize>() != head_dim / 2 {
            return Err(Error::Config(format!(
                "axis subspace sizes {sizes:?} do not partition {} subspaces",
                head_dim / 2
            )));
        }
        let mut subspace_axes = Vec::with_capacity(head_dim / 2);
        for (axis, n) in [Axis::Frame, Axis::Height, Axis::Width].into_iter().zip(sizes) {
            subspace_axes.extend(std::iter::repeat_n(axis, n));
        }
        let cfg = Self {
            head_dim,
            base: 10_000.0,
            subspace_axes,
            temporal_offset: 1,
            grid_h,
            grid_w,
            num_refs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_layout(mut self, layout: AxisLayout) -> Self {
        let pairs = self.head_dim / 2;
        let axes = [Axis::Frame, Axis::Height, Axis::Width];
        self.subspace_axes = match layout {
            AxisLayout::Interleaved => (0..pairs).map(|m| axes[m % 3]).collect(),
            AxisLayout::Blocked => {
                let each = pairs / 3;
                let frame = each + pairs % 3;
                (0..pairs)
                    .map(|m| if m < frame { axes[0] } else if m < frame + each { axes[1] } else { axes[2] })
                    .collect()
            }
        };
        self
    }

    pub fn with_base(mut self, base: f64) -> Self {
        self.base = base;
        self
    }

    pub fn with_temporal_offset(mut self, offset: u32) -> Self {
        self.temporal_offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim must be even and positive, got {}", self.head_dim)));
        }
        if self.subspace_axes.len() != self.head_dim / 2 {
            return Err(Error::Config("axis allocation does not cover head_dim / 2 subspaces".into()));
        }
        if !(self.base > 1.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("rope base must exceed 1, got {}", self.base)));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config(format!(
                "spatial grid must be positive, got {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        if self.num_refs == 0 || self.num_refs > MAX_REFS {
            return Err(Error::Config(format!(
                "number of references must be in 1..={MAX_REFS}, got {}",
                self.num_refs
            )));
        }
        Ok(())
    }

    pub fn num_subspaces(&self) -> usize {
        self.head_dim / 2
    }

    /// `base^(-2m/head_dim)`.
    pub fn frequency(&self, m: usize) -> f64 {
        self.base.powf(-2.0 * m as f64 / self.head_dim as f64)
    }

    /// Subspace indices tied to `axis`, ascending.
    pub fn subspaces(&self, axis: Axis) -> Vec<usize> {
        (0..self.num_subspaces())
            .filter(|&m| self.subspace_axes[m] == axis)
            .collect()
    }

    /// Rotation angle of subspace `m` for a token at `coord`.
    pub fn angle(&self, m: usize, coord: &RopeCoordinate) -> f64 {
        self.frequency(m) * coord.along(self.subspace_axes[m])
    }
}

/// What to lay out: latent frame count, spatial grid and reference count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutRequest {
    pub latent_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_refs: usize,
    pub scheme: RopeScheme,
}

/// Coordinates for every token in `[video..., ref_1..., ref_n...]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub scheme: RopeScheme,
    pub latent_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Frame-major, then row-major over the grid.
    pub video: Vec<RopeCoordinate>,
    pub refs: Vec<Vec<RopeCoordinate>>,
}

impl SequenceLayout {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_video_tokens(&self) -> usize {
        self.video.len()
    }

    pub fn num_refs(&self) -> usize {
        self.refs.len()
    }

    pub fn len(&self) -> usize {
        self.video.len() + self.refs.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token index range of reference block `j` (0-based).
    pub fn ref_range(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.video.len() + self.refs[..j].iter().map(Vec::len).sum::<usize>();
        start..start + self.refs[j].len()
    }

    /// Token index range of video latent frame `i`.
    pub fn latent_range(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.tokens_per_frame();
        i * n..(i + 1) * n
    }

    pub fn coordinates(&self) -> impl Iterator<Item = &RopeCoordinate> {
        self.video.iter().chain(self.refs.iter().flatten())
    }

    pub fn summary(&self) -> LayoutSummary {
        let span = |coords: &[RopeCoordinate]| {
            let range = |get: fn(&RopeCoordinate) -> u32| {
                let lo = coords.iter().map(get).min().unwrap_or(0);
                let hi = coords.iter().map(get).max().map_or(0, |v| v + 1);
                [lo, hi]
            };
            BlockSummary {
                tokens: coords.len(),
                f: range(|c| c.f),
                h: range(|c| c.h),
                w: range(|c| c.w),
            }
        };
        LayoutSummary {
            scheme: self.scheme,
            latent_frames: self.latent_frames,
            grid: [self.grid_h, self.grid_w],
            video: span(&self.video),
            refs: self.refs.iter().map(|r| span(r)).collect(),
        }
    }
}

/// JSON view of a layout: half-open coordinate ranges per block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSummary {
    pub scheme: RopeScheme,
    pub latent_frames: usize,
    pub grid: [usize; 2],
    pub video: BlockSummary,
    pub refs: Vec<BlockSummary>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub tokens: usize,
    pub f: [u32; 2],
    pub h: [u32; 2],
    pub w: [u32; 2],
}

pub fn assign_coordinates(req: &LayoutRequest, config: &RopeConfig) -> Result<SequenceLayout> {
    if req.num_refs == 0 || req.num_refs > MAX_REFS {
        return Err(Error::Config(format!(
            "number of references must be in 1..={MAX_REFS}, got {}",
            req.num_refs
        )));
    }
    if req.grid_h == 0 || req.grid_w == 0 || req.latent_frames == 0 {
        return Err(Error::Config(format!(
            "grid {}x{} with {} latent frames is not positive",
            req.grid_h, req.grid_w, req.latent_frames
        )));
    }
    if req.grid_h != config.grid_h || req.grid_w != config.grid_w {
        return Err(Error::Config(format!(
            "requested grid {}x{} differs from rope config {}x{}",
            req.grid_h, req.grid_w, config.grid_h, config.grid_w
        )));
    }
    let (gh, gw) = (req.grid_h as u32, req.grid_w as u32);
    let grid = || (0..gh).flat_map(move |h| (0..gw).map(move |w| (h, w)));

    let video = (0..req.latent_frames as u32)
        .flat_map(|f| grid().map(move |(h, w)| RopeCoordinate::new(f, h, w)))
        .collect();
    let last = req.latent_frames as u32 - 1;
    let o_t = config.temporal_offset;
    let refs = (1..=req.num_refs as u32)
        .map(|i| {
            grid()
                .map(|(h, w)| match req.scheme {
                    RopeScheme::Vanilla => RopeCoordinate::new(last + i, h, w),
                    RopeScheme::TemporalOffset => RopeCoordinate::new(last + o_t, h, w),
                    RopeScheme::RdRope => RopeCoordinate::new(last + o_t, h + i * gh, w + i * gw),
                })
                .collect()
        })
        .collect();
    Ok(SequenceLayout {
        scheme: req.scheme,
        latent_frames: req.latent_frames,
        grid_h: req.grid_h,
        grid_w: req.grid_w,
        video,
        refs,
    })
}

/// `R(theta) v` with `R = [[cos, -sin], [sin, cos]]`.
pub fn rotate(v: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

pub fn apply_rope(x: &[f64], coord: &RopeCoordinate, config: &RopeConfig) -> Result<Vec<f64>> {
    if x.len() != config.head_dim {
        return Err(Error::shape("apply_rope", &[x.len()], &[config.head_dim]));
    }
    Ok(x.chunks(2)
        .enumerate()
        .flat_map(|(m, pair)| rotate([pair[0], pair[1]], config.angle(m, coord)))
        .collect())
}

/// `sum_m q_m^T R(omega_m (p_j - p_i)) k_m`, the relative form of the score.
pub fn rope_attention_score(
    q: &[f64],
    k: &[f64],
    p_i: &RopeCoordinate,
    p_j: &RopeCoordinate,
    config: &RopeConfig,
) -> Result<f64> {
    if q.len() != config.head_dim || k.len() != config.head_dim {
        return Err(Error::shape("rope_attention_score", &[q.len()], &[k.len()]));
    }
    let mut score = 0.0;
    for (m, (qm, km)) in q.chunks(2).zip(k.chunks(2)).enumerate() {
        let axis = config.subspace_axes[m];
        let delta = p_j.along(axis) - p_i.along(axis);
        let rk = rotate([km[0], km[1]], config.frequency(m) * delta);
        score += qm[0] * rk[0] + qm[1] * rk[1];
    }
    Ok(score)
}

/// Score computed by encoding both vectors at their absolute positions and
/// taking the plain dot product.
pub fn rope_score_absolute(
    q: &[f64],
    k: &[f64],
    p_i: &RopeCoordinate,
    p_j: &RopeCoordinate,
    config: &RopeConfig,
) -> Result<f64> {
    let qr = apply_rope(q, p_i, config)?;
    let kr = apply_rope(k, p_j, config)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}

/// `omega_m * offset` for each subspace of `axis`, in subspace order.
pub fn phase_shift_spectrum(offset: u32, axis: Axis, config: &RopeConfig) -> Vec<f64> {
    config
        .subspaces(axis)
        .into_iter()
        .map(|m| config.frequency(m) * offset as f64)
        .collect()
}

/// Displacement of reference `i` (1-based) under `scheme`, measured from the
/// aligned placement `(f_last, h_v, w_v)` that shares the last video frame's
/// coordinates.
pub fn reference_offset(scheme: RopeScheme, i: usize, config: &RopeConfig) -> [u32; 3] {
    let i = i as u32;
    match scheme {
        RopeScheme::Vanilla => [i, 0, 0],
        RopeScheme::TemporalOffset => [config.temporal_offset, 0, 0],
        RopeScheme::RdRope => [
            config.temporal_offset,
            i * config.grid_h as u32,
            i * config.grid_w as u32,
        ],
    }
}

/// Extra rotation each subspace sees for reference `i` relative to the
/// aligned placement.
pub fn subspace_phase_shifts(scheme: RopeScheme, i: usize, config: &RopeConfig) -> Vec<f64> {
    let [df, dh, dw] = reference_offset(scheme, i, config);
    let delta = RopeCoordinate::new(df, dh, dw);
    (0..config.num_subspaces()).map(|m| config.angle(m, &delta)).collect()
}

/// Cosine/sine tables for the `rope` tape op, one entry per
/// `(token, subspace)` pair.
pub fn rope_tables<'a>(
    coords: impl IntoIterator<Item = &'a RopeCoordinate>,
    config: &RopeConfig,
) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::new();
    let mut sin = Vec::new();
    for c in coords {
        for m in 0..config.num_subspaces() {
            let (s, co) = config.angle(m, c).sin_cos();
            cos.push(co);
            sin.push(s);
        }
    }
    (cos, sin)
}
