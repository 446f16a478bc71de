//! Three-stage clip curation over annotation records, plus large-angle
//! reference sampling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::PoseAngles;
use crate::rope::MAX_REFS;

/// Reference poses must differ by more than this, in degrees.
pub const POSE_GAP_DEG: f64 = 45.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub duration: f64,
    pub fps: f64,
    /// `(width, height)`
    pub resolution: [u32; 2],
    pub persons: u32,
    pub coverage: f64,
    pub quality: f64,
    #[serde(default)]
    pub poses: Vec<PoseAngles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// Seed of a synthetic head, when the clip is procedurally rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u64>,
    /// Flat tensor file of `[frames, H, W, C]` pixels, for clips that are
    /// not rendered from an identity seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_frames: Option<Vec<usize>>,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: duration must be positive", self.clip_id)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("{}: fps must be positive", self.clip_id)));
        }
        if !(0.0..=1.0).contains(&self.coverage) || !(0.0..=1.0).contains(&self.quality) {
            return Err(Error::InvalidArgument(format!(
                "{}: coverage and quality must lie in [0, 1]",
                self.clip_id
            )));
        }
        let frames = (self.duration * self.fps).round() as usize;
        if !self.poses.is_empty() && self.poses.len() != frames {
            return Err(Error::InvalidArgument(format!(
                "{}: {} poses for {frames} frames",
                self.clip_id,
                self.poses.len()
            )));
        }
        Ok(())
    }

    /// Largest minus smallest `(yaw, pitch)` over the clip.
    pub fn pose_ranges(&self) -> Option<(f64, f64)> {
        if self.poses.is_empty() {
            return None;
        }
        let range = |f: fn(&PoseAngles) -> f64| {
            let (lo, hi) = self
                .poses
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        };
        Some((range(|p| p.yaw), range(|p| p.pitch)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl StageReport {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            ..Self::default()
        }
    }

    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub kept: Vec<ClipRecord>,
    pub report: StageReport,
}

fn run_stage(stage: &str, records: Vec<ClipRecord>, verdict: impl Fn(&ClipRecord) -> Option<&'static str>) -> StageOutput {
    let mut report = StageReport::new(stage);
    report.input = records.len();
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        match verdict(&r) {
            None => kept.push(r),
            Some(reason) => *report.dropped.entry(reason.to_string()).or_default() += 1,
        }
    }
    report.kept = kept.len();
    StageOutput { kept, report }
}

pub fn coarse_verdict(r: &ClipRecord, quality_threshold: f64) -> Option<&'static str> {
    if r.coverage <= 0.0 {
        Some("no-face")
    } else if r.quality < quality_threshold {
        Some("low-quality")
    } else {
        None
    }
}

pub fn clip_verdict(r: &ClipRecord, min_duration: f64, min_coverage: f64) -> Option<&'static str> {
    if r.duration < min_duration {
        Some("short")
    } else if r.persons != 1 {
        Some("multi-person")
    } else if r.coverage < min_coverage {
        Some("low-coverage")
    } else {
        None
    }
}

pub fn pose_verdict(r: &ClipRecord) -> Option<&'static str> {
    match r.pose_ranges() {
        None => Some("no-pose"),
        Some((yaw, pitch)) if yaw > POSE_GAP_DEG || pitch > POSE_GAP_DEG => None,
        Some(_) => Some("small-angle"),
    }
}

/// Keeps clips with `quality >= threshold` and a visible face.
pub fn coarse_filter(records: Vec<ClipRecord>, quality_threshold: f64) -> Result<StageOutput> {
    if !(0.0..=1.0).contains(&quality_threshold) {
        return Err(Error::Config(format!("quality threshold {quality_threshold} outside [0, 1]")));
    }
    Ok(run_stage("coarse", records, |r| coarse_verdict(r, quality_threshold)))
}

/// Keeps single-person clips at least `min_duration` seconds long whose
/// face track covers at least `min_coverage` of the frames.
pub fn clip_filter(records: Vec<ClipRecord>, min_duration: f64, min_coverage: f64) -> Result<StageOutput> {
    if !(min_duration > 0.0) || !(min_coverage > 0.0 && min_coverage <= 1.0) {
        return Err(Error::Config(format!(
            "clip thresholds must be positive (duration {min_duration}, coverage {min_coverage})"
        )));
    }
    Ok(run_stage("clip", records, |r| clip_verdict(r, min_duration, min_coverage)))
}

/// Keeps clips whose yaw or pitch range exceeds 45 degrees.
pub fn pose_filter(records: Vec<ClipRecord>) -> StageOutput {
    run_stage("pose", records, pose_verdict)
}

pub fn pose_distance(a: &PoseAngles, b: &PoseAngles) -> f64 {
    (a.yaw - b.yaw).abs().max((a.pitch - b.pitch).abs())
}

fn spread_ok(poses: &[PoseAngles], frames: &[usize]) -> bool {
    frames.iter().enumerate().all(|(k, &a)| {
        frames[k + 1..]
            .iter()
            .all(|&b| pose_distance(&poses[a], &poses[b]) > POSE_GAP_DEG)
    })
}

/// `n` frame indices (ascending) with pairwise pose distance above 45
/// degrees. Seeded rejection sampling first, then the greedy farthest-point
/// set.
pub fn sample_references(record: &ClipRecord, n: usize, seed: u64, max_attempts: usize) -> Result<Vec<usize>> {
    if n == 0 || n > MAX_REFS {
        return Err(Error::Config(format!("number of references must be in 1..={MAX_REFS}, got {n}")));
    }
    let poses = &record.poses;
    let spread_error = || Error::InsufficientPoseSpread {
        clip_id: record.clip_id.clone(),
        wanted: n,
    };
    if poses.len() < n {
        return Err(spread_error());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_attempts {
        let mut pick = index::sample(&mut rng, poses.len(), n).into_vec();
        if spread_ok(poses, &pick) {
            pick.sort_unstable();
            return Ok(pick);
        }
    }
    let greedy = farthest_point_set(poses, n);
    if greedy.len() == n && spread_ok(poses, &greedy) {
        Ok(greedy)
    } else {
        Err(spread_error())
    }
}

/// Farthest pair first, then repeatedly the frame farthest from the chosen
/// set. Ties go to the lowest index.
pub fn farthest_point_set(poses: &[PoseAngles], n: usize) -> Vec<usize> {
    if poses.is_empty() || n == 0 {
        return Vec::new();
    }
    if n == 1 || poses.len() == 1 {
        return vec![0];
    }
    let mut best = (0, 1, f64::NEG_INFINITY);
    for a in 0..poses.len() {
        for b in a + 1..poses.len() {
            let d = pose_distance(&poses[a], &poses[b]);
            if d > best.2 {
                best = (a, b, d);
            }
        }
    }
    let mut chosen = vec![best.0, best.1];
    while chosen.len() < n.min(poses.len()) {
        let mut next = (usize::MAX, f64::NEG_INFINITY);
        for (i, p) in poses.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| pose_distance(p, &poses[c]))
                .fold(f64::INFINITY, f64::min);
            if d > next.1 {
                next = (i, d);
            }
        }
        chosen.push(next.0);
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub quality_threshold: f64,
    pub min_duration: f64,
    pub min_coverage: f64,
    pub num_refs: usize,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            quality_threshold: 0.5,
            min_duration: 3.0,
            min_coverage: 0.8,
            num_refs: 3,
            seed: 0,
            max_attempts: 100,
        }
    }
}

/// Per-clip sampling seed: the run seed mixed with a digest of the clip id.
pub fn clip_seed(seed: u64, clip_id: &str) -> u64 {
    let digest = Sha256::digest(clip_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(head)
}

/// Coarse, clip and pose stages in order, then reference sampling. Clips
/// that cannot provide references are dropped in a final stage.
pub fn run_pipeline(records: Vec<ClipRecord>, config: &PipelineConfig) -> Result<(Vec<ClipRecord>, PipelineReport)> {
    let coarse = coarse_filter(records, config.quality_threshold)?;
    let clip = clip_filter(coarse.kept, config.min_duration, config.min_coverage)?;
    let pose = pose_filter(clip.kept);
    let mut refs = StageReport::new("references");
    refs.input = pose.kept.len();
    let mut out = Vec::with_capacity(pose.kept.len());
    for mut r in pose.kept {
        match sample_references(&r, config.num_refs, clip_seed(config.seed, &r.clip_id), config.max_attempts) {
            Ok(frames) => {
                r.reference_frames = Some(frames);
                out.push(r);
            }
            Err(e @ Error::InsufficientPoseSpread { .. }) => {
                *refs.dropped.entry(e.code().to_string()).or_default() += 1;
            }
            Err(e) => return Err(e),
        }
    }
    refs.kept = out.len();
    Ok((
        out,
        PipelineReport {
            stages: vec![coarse.report, clip.report, pose.report, refs],
        },
    ))
}

pub fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: k + 1, message };
        let r: ClipRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        r.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Random annotation records covering every drop reason.
pub fn synthetic_corpus(count: usize, seed: u64) -> Vec<ClipRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let fps = 16.0;
            let duration = (rng.random_range(1.5..8.0f64) * fps).round() / fps;
            let frames = (duration * fps).round() as usize;
            let persons = if rng.random_bool(0.85) { 1 } else { rng.random_range(2..4) };
            let coverage = if rng.random_bool(0.05) { 0.0 } else { rng.random_range(0.5..1.0) };
            let quality = rng.random_range(0.0..1.0);
            let poses = if rng.random_bool(0.05) {
                Vec::new()
            } else {
                let yaw_amp = rng.random_range(0.0..90.0);
                let pitch_amp = rng.random_range(0.0..35.0);
                let yaw_phase = rng.random_range(0.0..std::f64::consts::TAU);
                let pitch_phase = rng.random_range(0.0..std::f64::consts::TAU);
                (0..frames)
                    .map(|f| {
                        let tau = f as f64 / frames.max(2) as f64 * std::f64::consts::TAU;
                        PoseAngles::new(
                            yaw_amp * (tau + yaw_phase).sin(),
                            pitch_amp * (tau + pitch_phase).sin(),
                            0.0,
                        )
                    })
                    .collect()
            };
            ClipRecord {
                clip_id: format!("clip{k:05}"),
                duration,
                fps,
                resolution: [832, 480],
                persons,
                coverage,
                quality,
                poses,
                caption: None,
                identity: Some(rng.random_range(0..1000)),
                video_path: None,
                reference_frames: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, duration: f64, persons: u32, coverage: f64, quality: f64, yaws: &[f64]) -> ClipRecord {
        let fps = yaws.len() as f64 / duration;
        ClipRecord {
            clip_id: id.into(),
            duration,
            fps,
            resolution: [832, 480],
            persons,
            coverage,
            quality,
            poses: yaws.iter().map(|&y| PoseAngles::new(y, 0.0, 0.0)).collect(),
            caption: None,
            identity: None,
            video_path: None,
            reference_frames: None,
        }
    }

    #[test]
    fn coarse_cases() {
        let ok = record("a", 4.0, 1, 0.5, 0.9, &[0.0; 4]);
        let noface = record("b", 4.0, 1, 0.0, 0.9, &[0.0; 4]);
        let out = coarse_filter(vec![ok, noface], 0.5).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.report.dropped["no-face"], 1);
        assert!(coarse_filter(vec![], 1.5).is_err());
    }

    #[test]
    fn clip_cases() {
        let short = record("a", 2.5, 1, 0.9, 0.9, &[0.0; 5]);
        let multi = record("b", 4.0, 2, 0.9, 0.9, &[0.0; 4]);
        let edge = record("c", 3.0, 1, 0.9, 0.9, &[0.0; 3]);
        let out = clip_filter(vec![short, multi, edge], 3.0, 0.8).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].clip_id, "c");
        assert_eq!(out.report.dropped["short"], 1);
        assert_eq!(out.report.dropped["multi-person"], 1);
    }

    #[test]
    fn pose_cases() {
        let mut wide = record("a", 4.0, 1, 0.9, 0.9, &[0.0, 50.0, 10.0, 20.0]);
        wide.poses[1].pitch = 10.0;
        let narrow = record("b", 4.0, 1, 0.9, 0.9, &[0.0, 30.0, 0.0, 0.0]);
        let exact = record("c", 4.0, 1, 0.9, 0.9, &[0.0, 45.0, 0.0, 0.0]);
        let none = record("d", 4.0, 1, 0.9, 0.9, &[]);
        let out = pose_filter(vec![wide, narrow, exact, none]);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.report.dropped["small-angle"], 2);
        assert_eq!(out.report.dropped["no-pose"], 1);
    }

    #[test]
    fn reference_sampling() {
        let r = record("a", 3.0, 1, 0.9, 0.9, &[0.0, 50.0, 100.0]);
        assert_eq!(sample_references(&r, 3, 7, 100).unwrap(), vec![0, 1, 2]);
        let flat = record("b", 3.0, 1, 0.9, 0.9, &[10.0; 3]);
        assert!(matches!(
            sample_references(&flat, 2, 0, 100),
            Err(Error::InsufficientPoseSpread { .. })
        ));
        assert!(sample_references(&r, 4, 0, 100).is_err());
        // Zero attempts exercises the greedy fallback.
        assert_eq!(sample_references(&r, 3, 0, 0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_manifest() {
        let (out, report) = run_pipeline(parse_manifest("").unwrap(), &PipelineConfig::default()).unwrap();
        assert!(out.is_empty());
        assert!(report.stages.iter().all(|s| s.input == 0 && s.kept == 0));
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let good = serde_json::to_string(&record("a", 3.0, 1, 0.9, 0.9, &[0.0; 3])).unwrap();
        let bad_pose = serde_json::to_string(&record("b", 3.0, 1, 0.9, 0.9, &[0.0; 3]))
            .unwrap()
            .replace("\"duration\":3.0", "\"duration\":5.0");
        match parse_manifest(&format!("{good}\n{bad_pose}\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_manifest("{"), Err(Error::Parse { line: 1, .. })));
    }
}
