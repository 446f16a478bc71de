//! Facial-direction trajectories: statistics, collapse detection and SVG plots.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::masking::PoseAngles;

pub const DEFAULT_CONE_DEG: f64 = 10.0;
pub const DEFAULT_MIN_RUN: usize = 20;

/// `(sin yaw cos pitch, sin pitch, cos yaw cos pitch)` for angles in degrees.
pub fn pose_to_direction(yaw: f64, pitch: f64) -> [f64; 3] {
    let (sy, cy) = yaw.to_radians().sin_cos();
    let (sp, cp) = pitch.to_radians().sin_cos();
    [sy * cp, sp, cy * cp]
}

/// Angle between two unit vectors, accurate near 0 and pi.
pub fn angle_between(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    s.atan2(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub direction: [f64; 3],
    pub time: f64,
}

/// One point per frame with time `k / (frames - 1)`.
pub fn build_trajectory(poses: &[PoseAngles]) -> Result<Vec<TrajectoryPoint>> {
    if poses.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a trajectory needs at least 2 frames, got {}",
            poses.len()
        )));
    }
    let last = (poses.len() - 1) as f64;
    Ok(poses
        .iter()
        .enumerate()
        .map(|(k, p)| TrajectoryPoint {
            direction: pose_to_direction(p.yaw, p.pitch),
            time: k as f64 / last,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseSegment {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    /// Normalised mean direction of the run.
    pub centroid: [f64; 3],
}

impl CollapseSegment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStats {
    /// Mean pairwise angle, radians.
    pub dispersion: f64,
    /// Mean consecutive angle, radians.
    pub smoothness: f64,
    pub max_jump: f64,
    pub collapse_segments: Vec<CollapseSegment>,
}

/// Runs of at least `min_len` points all within `cone_deg` of the run's
/// first point, scanned left to right without overlap.
pub fn collapse_segments(points: &[TrajectoryPoint], cone_deg: f64, min_len: usize) -> Vec<CollapseSegment> {
    let cone = cone_deg.to_radians();
    let mut out = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let anchor = points[i].direction;
        let mut j = i;
        while j + 1 < points.len() && angle_between(&anchor, &points[j + 1].direction) <= cone {
            j += 1;
        }
        if j + 1 - i >= min_len.max(1) {
            let mut c = [0.0; 3];
            for p in &points[i..=j] {
                for (a, b) in c.iter_mut().zip(&p.direction) {
                    *a += b;
                }
            }
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if norm > 0.0 {
                c.iter_mut().for_each(|v| *v /= norm);
            }
            out.push(CollapseSegment {
                start: i,
                end: j,
                centroid: c,
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

pub fn trajectory_stats(points: &[TrajectoryPoint], cone_deg: f64, min_len: usize) -> Result<TrajectoryStats> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectory statistics need at least 2 points, got {n}"
        )));
    }
    let mut pair_sum = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            pair_sum += angle_between(&points[a].direction, &points[b].direction);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let steps: Vec<f64> = points
        .windows(2)
        .map(|w| angle_between(&w[0].direction, &w[1].direction))
        .collect();
    Ok(TrajectoryStats {
        dispersion: pair_sum / pairs,
        smoothness: steps.iter().sum::<f64>() / steps.len() as f64,
        max_jump: steps.iter().cloned().fold(0.0, f64::max),
        collapse_segments: collapse_segments(points, cone_deg, min_len),
    })
}

pub fn write_stats_csv(path: &Path, stats: &TrajectoryStats) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "key,value")?;
    writeln!(f, "dispersion,{}", stats.dispersion)?;
    writeln!(f, "smoothness,{}", stats.smoothness)?;
    writeln!(f, "max_jump,{}", stats.max_jump)?;
    writeln!(f, "collapse_segments,{}", stats.collapse_segments.len())?;
    for (k, s) in stats.collapse_segments.iter().enumerate() {
        writeln!(f, "segment_{k},{}-{}", s.start, s.end)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Projection {
    #[default]
    Xy,
    Xz,
    Zy,
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xy" => Ok(Projection::Xy),
            "xz" => Ok(Projection::Xz),
            "zy" => Ok(Projection::Zy),
            other => Err(Error::Config(format!("unknown projection {other:?}"))),
        }
    }
}

impl Projection {
    fn project(self, d: &[f64; 3]) -> (f64, f64) {
        match self {
            Projection::Xy => (d[0], d[1]),
            Projection::Xz => (d[0], d[2]),
            Projection::Zy => (d[2], d[1]),
        }
    }
}

const SVG_SIZE: f64 = 400.0;
const SVG_RADIUS: f64 = 180.0;
const RAMP_START: [f64; 3] = [44.0, 123.0, 182.0];
const RAMP_END: [f64; 3] = [215.0, 25.0, 28.0];

fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let c: Vec<u8> = (0..3)
        .map(|k| (RAMP_START[k] + (RAMP_END[k] - RAMP_START[k]) * t).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Orthographic scatter of the directions, one dot per point coloured by
/// time, plus a black origin dot.
pub fn render_trajectory_svg(points: &[TrajectoryPoint], projection: Projection) -> String {
    let mid = SVG_SIZE / 2.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>"#);
    let (lo, hi) = (mid - SVG_RADIUS, mid + SVG_RADIUS);
    let _ = writeln!(s, r##"<line x1="{lo}" y1="{mid}" x2="{hi}" y2="{mid}" stroke="#cccccc"/>"##);
    let _ = writeln!(s, r##"<line x1="{mid}" y1="{lo}" x2="{mid}" y2="{hi}" stroke="#cccccc"/>"##);
    for p in points {
        let (u, v) = projection.project(&p.direction);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="{}"/>"#,
            mid + SVG_RADIUS * u,
            mid - SVG_RADIUS * v,
            ramp(p.time)
        );
    }
    let _ = writeln!(s, r##"<circle cx="{mid:.3}" cy="{mid:.3}" r="4" fill="#000000"/>"##);
    s.push_str("</svg>\n");
    s
}

#[derive(Deserialize)]
struct PoseLine {
    frame: usize,
    yaw: f64,
    pitch: f64,
    #[serde(default)]
    roll: f64,
}

/// Parses JSON-lines of `{frame, yaw, pitch, roll}`, sorted by frame.
pub fn parse_pose_jsonl(text: &str) -> Result<Vec<PoseAngles>> {
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PoseLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: k + 1,
            message: e.to_string(),
        })?;
        rows.push((p.frame, PoseAngles::new(p.yaw, p.pitch, p.roll)));
    }
    rows.sort_by_key(|(f, _)| *f);
    Ok(rows.into_iter().map(|(_, p)| p).collect())
}
