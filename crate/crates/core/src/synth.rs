//! Procedural "heads" for desk-scale experiments.
//!
//! A head is a disk centred in the image. Channels 0 and 1 carry the
//! identity: four half-disk intensities derived from the identity seed.
//! Channel 2 carries a Gaussian feature blob whose offset from the centre is
//! the projected facing direction, so pose can be read back from pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::TrainingExample;
use crate::masking::PoseAngles;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

const HEAD_RADIUS: f64 = 0.36;
const BLOB_REACH: f64 = 0.3;
const BLOB_SIGMA: f64 = 0.07;
const FACE_THRESHOLD: f64 = 0.25;
const BLOB_MIN_MASS: f64 = 1.0;

/// Four identity intensities in `[-1, 1]`, a deterministic function of the seed.
pub fn identity_signature(identity: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(identity ^ 0x1d_e7_17_ee);
    let mut u = [0.0; 4];
    for v in &mut u {
        *v = rng.random_range(-1.0..1.0);
    }
    u
}

fn level(u: f64) -> f64 {
    0.5 + 0.4 * u
}

/// Unit facing vector `(x, y, z)` with `+z` frontal.
pub fn facing(pose: &PoseAngles) -> [f64; 3] {
    let (yaw, pitch) = (pose.yaw.to_radians(), pose.pitch.to_radians());
    [yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos()]
}

/// `[size, size, 3]` render of `identity` looking along `pose`.
pub fn render_head(identity: u64, pose: &PoseAngles, size: usize) -> Tensor {
    let u = identity_signature(identity);
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let radius = HEAD_RADIUS * s;
    let [fx, fy, _] = facing(pose);
    let (bx, by) = (c + BLOB_REACH * s * fx, c - BLOB_REACH * s * fy);
    let sigma = BLOB_SIGMA * s;
    let mut data = vec![0.0; size * size * CHANNELS];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let px = &mut data[(y * size + x) * CHANNELS..][..CHANNELS];
            if (xf - c).hypot(yf - c) <= radius {
                px[0] = if xf < c { level(u[0]) } else { level(u[1]) };
                px[1] = if yf < c { level(u[2]) } else { level(u[3]) };
            }
            let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
            px[2] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    Tensor::new(&[size, size, CHANNELS], data).expect("render shape")
}

/// `[frames, size, size, 3]` clip.
pub fn render_clip(identity: u64, poses: &[PoseAngles], size: usize) -> Tensor {
    let mut data = Vec::with_capacity(poses.len() * size * size * CHANNELS);
    for p in poses {
        data.extend_from_slice(render_head(identity, p, size).data());
    }
    Tensor::new(&[poses.len(), size, size, CHANNELS], data).expect("clip shape")
}

/// Smooth yaw/pitch track: sinusoids with seeded amplitude, frequency and phase.
pub fn pose_track(seed: u64, frames: usize) -> Vec<PoseAngles> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw_amp = rng.random_range(55.0..80.0);
    let pitch_amp = rng.random_range(8.0..30.0);
    let yaw_freq = rng.random_range(0.6..1.4);
    let pitch_freq = rng.random_range(0.5..1.5);
    let yaw_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let pitch_phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..frames)
        .map(|k| {
            let tau = if frames > 1 { k as f64 / (frames - 1) as f64 } else { 0.0 };
            let arg = |f: f64, ph: f64| std::f64::consts::TAU * f * tau + ph;
            PoseAngles::new(
                yaw_amp * arg(yaw_freq, yaw_phase).sin(),
                pitch_amp * arg(pitch_freq, pitch_phase).sin(),
                0.0,
            )
        })
        .collect()
}

/// Three reference poses near yaw -60, 0 and 60 degrees with seeded jitter;
/// every pair differs by more than 45 degrees in yaw.
pub fn reference_poses(seed: u64) -> Vec<PoseAngles> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ef5);
    [-60.0, 0.0, 60.0]
        .into_iter()
        .map(|yaw: f64| PoseAngles::new(yaw + rng.random_range(-5.0..5.0), rng.random_range(-15.0..15.0), 0.0))
        .collect()
}

/// A training clip of `frames` frames for `identity`, with a seeded pose
/// track and three references.
pub fn training_example(identity: u64, seed: u64, frames: usize, size: usize) -> TrainingExample {
    let frame_poses = pose_track(seed, frames);
    let reference_poses = reference_poses(seed);
    TrainingExample {
        video: render_clip(identity, &frame_poses, size),
        fps: 16.0,
        references: reference_poses.iter().map(|p| render_head(identity, p, size)).collect(),
        reference_poses,
        frame_poses,
        prompt: format!("a person turning their head, identity {identity}"),
    }
}

/// Region means of the identity channels, or `None` when no head is visible.
pub fn read_identity(frame: &Tensor) -> Option<[f64; 4]> {
    let [h, w, c] = frame.shape() else { return None };
    if *c != CHANNELS || h != w {
        return None;
    }
    let size = *h;
    let s = size as f64;
    let centre = (s - 1.0) / 2.0;
    // Stay away from the half-disk boundaries and the rim.
    let inner = HEAD_RADIUS * s * 0.9;
    let margin = 0.5;
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    let mut presence = 0.0;
    let mut inside = 0usize;
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            if (xf - centre).hypot(yf - centre) > inner {
                continue;
            }
            let px = &frame.data()[(y * size + x) * CHANNELS..][..CHANNELS];
            presence += px[0] + px[1];
            inside += 1;
            if (xf - centre).abs() > margin {
                let k = if xf < centre { 0 } else { 1 };
                sums[k] += px[0];
                counts[k] += 1;
            }
            if (yf - centre).abs() > margin {
                let k = if yf < centre { 2 } else { 3 };
                sums[k] += px[1];
                counts[k] += 1;
            }
        }
    }
    if inside == 0 || presence / inside as f64 <= FACE_THRESHOLD || counts.contains(&0) {
        return None;
    }
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (sums[k] / counts[k] as f64 - 0.5) / 0.4;
    }
    Some(out)
}

/// Pose recovered from the feature-blob centroid, or `None` without a blob.
pub fn estimate_pose(frame: &Tensor) -> Option<PoseAngles> {
    let [h, w, c] = frame.shape() else { return None };
    if *c != CHANNELS || h != w {
        return None;
    }
    let size = *h;
    let s = size as f64;
    let centre = (s - 1.0) / 2.0;
    let (mut mass, mut mx, mut my) = (0.0, 0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let v = frame.data()[(y * size + x) * CHANNELS + 2].max(0.0);
            mass += v;
            mx += v * x as f64;
            my += v * y as f64;
        }
    }
    if mass < BLOB_MIN_MASS {
        return None;
    }
    let fx = (mx / mass - centre) / (BLOB_REACH * s);
    let fy = -(my / mass - centre) / (BLOB_REACH * s);
    let r = fx.hypot(fy);
    let (fx, fy) = if r > 1.0 { (fx / r, fy / r) } else { (fx, fy) };
    let fz = (1.0 - fx * fx - fy * fy).max(0.0).sqrt();
    Some(PoseAngles::new(fx.atan2(fz).to_degrees(), fy.asin().to_degrees(), 0.0))
}
