//! Acceptance criteria 1-10. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits non-zero when a gated criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvref::datapipe::{self, ClipRecord, PipelineConfig};
use mvref::flow::{self, euler_integrate, probe_loss, LrSchedule, OptimizerKind, SampleConditions, TrainConfig, TrainingExample};
use mvref::masking::{build_view_attention_mask, generate_region_mask, match_reference_view, MaskingMode, PoseAngles};
use mvref::metrics::{self, FaceEmbedding, FaceExtractor, ReferenceSet};
use mvref::model::{concat_sequence, EncoderConfig, LatentVideo, Model, ModelConfig, PatchEncoder, PromptEmbedding};
use mvref::rope::{
    assign_coordinates, phase_shift_spectrum, rope_attention_score, subspace_phase_shifts, Axis, AxisLayout,
    LayoutRequest, RopeConfig, RopeCoordinate, RopeScheme,
};
use mvref::synth;
use mvref::tensor::Tensor;
use mvref::trajectory::{self, build_trajectory, trajectory_stats, TrajectoryPoint};
use mvref::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Fails the criterion with a message unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Ok(outcome(false, format!($($msg)+)));
        }
    };
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

// ---------------------------------------------------------------- 1

/// Relative-rotation oracle in complex form:
/// `sum_m Re(conj(q_m) k_m e^{i w_m (p_j - p_i)})` with `w_m = base^(-2m/d)`.
fn complex_score(q: &[f64], k: &[f64], pi: &RopeCoordinate, pj: &RopeCoordinate, cfg: &RopeConfig) -> f64 {
    let d = q.len();
    let mut s = 0.0;
    for m in 0..d / 2 {
        let w = cfg.base.powf(-2.0 * m as f64 / d as f64);
        let (a, b) = match cfg.subspace_axes[m] {
            Axis::Frame => (pi.f, pj.f),
            Axis::Height => (pi.h, pj.h),
            Axis::Width => (pi.w, pj.w),
        };
        let theta = w * (b as f64 - a as f64);
        let (qr, qi) = (q[2 * m], q[2 * m + 1]);
        let (kr, ki) = (k[2 * m], k[2 * m + 1]);
        // conj(q) * k = (qr kr + qi ki) + i (qr ki - qi kr)
        let (re, im) = (qr * kr + qi * ki, qr * ki - qi * kr);
        s += re * theta.cos() - im * theta.sin();
    }
    s
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for scheme in RopeScheme::ALL {
        let cfg = RopeConfig::new(24, 8, 8, 3)?;
        let layout = assign_coordinates(
            &LayoutRequest { latent_frames: 3, grid_h: 8, grid_w: 8, num_refs: 3, scheme },
            &cfg,
        )?;
        let coords: Vec<RopeCoordinate> = layout.coordinates().copied().collect();
        for _ in 0..100 {
            let q = gaussian_vec(&mut rng, 24);
            let k = gaussian_vec(&mut rng, 24);
            let pi = coords[rng.random_range(0..coords.len())];
            let pj = coords[rng.random_range(0..coords.len())];
            let s = [rng.random_range(0..50), rng.random_range(0..50), rng.random_range(0..50)];
            let shift = |c: &RopeCoordinate| RopeCoordinate::new(c.f + s[0], c.h + s[1], c.w + s[2]);
            let base = rope_attention_score(&q, &k, &pi, &pj, &cfg)?;
            let moved = rope_attention_score(&q, &k, &shift(&pi), &shift(&pj), &cfg)?;
            let absolute = mvref::rope::rope_score_absolute(&q, &k, &shift(&pi), &shift(&pj), &cfg)?;
            let oracle = complex_score(&q, &k, &pi, &pj, &cfg);
            for v in [moved, absolute, oracle] {
                worst = worst.max((v - base).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst < 1e-10, "max deviation {worst:.3e}");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(outcome(true, format!("300 draws, max deviation {worst:.2e}, {elapsed:.2?}")))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Result<Outcome> {
    let mut cases = 0;
    for head_dim in [6, 8, 12, 24, 32] {
        for (gh, gw) in [(2, 3), (4, 4), (8, 8)] {
            for layout_kind in [AxisLayout::Blocked, AxisLayout::Interleaved] {
                for offset in [1, 2, 5] {
                    for n in 1..=3 {
                        let cfg = RopeConfig::new(head_dim, gh, gw, n)?.with_layout(layout_kind).with_temporal_offset(offset);
                        let req = LayoutRequest { latent_frames: 2, grid_h: gh, grid_w: gw, num_refs: n, scheme: RopeScheme::RdRope };
                        let layout = assign_coordinates(&req, &cfg)?;
                        let f0 = layout.refs[0][0].f;
                        ensure!(
                            layout.refs.iter().flatten().all(|c| c.f == f0),
                            "reference blocks disagree on the temporal index (d={head_dim}, n={n})"
                        );
                        let range = |cs: &[RopeCoordinate]| {
                            let h = (cs.iter().map(|c| c.h).min().unwrap(), cs.iter().map(|c| c.h).max().unwrap());
                            let w = (cs.iter().map(|c| c.w).min().unwrap(), cs.iter().map(|c| c.w).max().unwrap());
                            (h, w)
                        };
                        let mut blocks = vec![range(&layout.video)];
                        blocks.extend(layout.refs.iter().map(|r| range(r)));
                        for a in 0..blocks.len() {
                            for b in a + 1..blocks.len() {
                                let (ha, wa) = blocks[a];
                                let (hb, wb) = blocks[b];
                                let h_disjoint = ha.1 < hb.0 || hb.1 < ha.0;
                                let w_disjoint = wa.1 < wb.0 || wb.1 < wa.0;
                                ensure!(h_disjoint && w_disjoint, "blocks {a} and {b} overlap spatially (d={head_dim}, n={n})");
                            }
                        }
                        for i in 1..=n {
                            let t_only = subspace_phase_shifts(RopeScheme::TemporalOffset, i, &cfg);
                            let rd = subspace_phase_shifts(RopeScheme::RdRope, i, &cfg);
                            for m in 0..cfg.num_subspaces() {
                                let is_t = cfg.subspace_axes[m] == Axis::Frame;
                                ensure!((t_only[m] != 0.0) == is_t, "temporal offset shifts subspace {m} wrongly");
                                ensure!(rd[m] != 0.0, "rd-rope leaves subspace {m} unshifted (d={head_dim})");
                            }
                        }
                        for axis in [Axis::Frame, Axis::Height, Axis::Width] {
                            let spec = phase_shift_spectrum(offset, axis, &cfg);
                            ensure!(spec.windows(2).all(|w| w[1] < w[0]), "spectrum on {axis:?} not strictly decreasing");
                            for (m, v) in cfg.subspaces(axis).into_iter().zip(&spec) {
                                let want = cfg.base.powf(-2.0 * m as f64 / head_dim as f64) * offset as f64;
                                ensure!((v - want).abs() <= 1e-15 * want.abs().max(1.0), "spectrum entry {m} off");
                            }
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(outcome(true, format!("{cases} configurations")))
}

// ---------------------------------------------------------------- 3

fn small_sequence(model: &Model, seed: u64, view_mask: bool) -> Result<(mvref::model::TokenSequence, PromptEmbedding)> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dl = cfg.latent_dim;
    let video = LatentVideo {
        latents: Tensor::new(
            &[cfg.latent_frames, cfg.grid_h, cfg.grid_w, dl],
            gaussian_vec(&mut rng, cfg.latent_frames * cfg.grid_h * cfg.grid_w * dl),
        )?,
        fps: 16.0,
        source_frames: cfg.latent_frames * 4,
    };
    let refs = (0..cfg.num_refs)
        .map(|_| {
            Ok(mvref::model::ReferenceLatent {
                latents: Tensor::new(&[cfg.grid_h, cfg.grid_w, dl], gaussian_vec(&mut rng, cfg.grid_h * cfg.grid_w * dl))?,
                origin: mvref::model::LatentOrigin::Clean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seq = concat_sequence(&video, &refs, cfg.scheme, &model.rope_config()?)?;
    if view_mask {
        let anchors: Vec<PoseAngles> = (0..cfg.latent_frames)
            .map(|i| PoseAngles::new(-50.0 + 100.0 * i as f64 / cfg.latent_frames.max(2) as f64, 0.0, 0.0))
            .collect();
        let poses: Vec<PoseAngles> = (0..cfg.num_refs).map(|j| PoseAngles::new(-60.0 + 60.0 * j as f64, 0.0, 0.0)).collect();
        let mask = build_view_attention_mask(&seq.layout, &anchors, &poses)?;
        seq = seq.with_view_mask(mask)?;
    }
    let prompt = PromptEmbedding::from_text("gradient probe", cfg.prompt_len, cfg.width);
    Ok((seq, prompt))
}

fn criterion_3() -> Result<Outcome> {
    let start = Instant::now();
    let mut model = Model::new(ModelConfig { grid_h: 4, grid_w: 4, seed: 5, masking: MaskingMode::View, ..ModelConfig::default() })?;
    let (seq, prompt) = small_sequence(&model, 11, true)?;
    let t = 0.37;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = Tensor::new(&[seq.num_video_tokens(), seq.latent_dim()], gaussian_vec(&mut rng, seq.num_video_tokens() * seq.latent_dim()))?;
    let (_, grads) = model.loss_and_grads(&seq, t, &prompt, &target)?;
    let loss_at = |m: &Model| -> Result<f64> { flow::flow_loss(&m.forward(&seq, t, &prompt)?, &target) };

    let sizes: Vec<usize> = model.params.tensors().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for _ in 0..50 {
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let orig = model.params.tensors()[p].data()[flat];
        model.params.tensors_mut()[p].data_mut()[flat] = orig + h;
        let up = loss_at(&model)?;
        model.params.tensors_mut()[p].data_mut()[flat] = orig - h;
        let down = loss_at(&model)?;
        model.params.tensors_mut()[p].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[p][flat];
        // relative error with an absolute floor for near-zero gradients
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_at = format!("{}[{flat}]", model.params.names()[p]);
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst < 1e-4, "max relative error {worst:.3e} at {worst_at}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(outcome(true, format!("50 parameters, max relative error {worst:.2e}, {elapsed:.2?}")))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Result<Outcome> {
    for (h, w) in [(1, 1), (3, 5), (8, 8), (16, 9), (32, 32)] {
        for seed in 0..20 {
            let m = generate_region_mask(h, w, 0.6, seed)?;
            let zeros = m.bits.iter().filter(|&&b| b == 0).count();
            let want = (0.6 * (h * w) as f64).round() as usize;
            ensure!(zeros == want, "{h}x{w} seed {seed}: {zeros} zeros, want {want}");
        }
    }

    let mut max_row_err: f64 = 0.0;
    let mut maps = 0;
    for scheme in RopeScheme::ALL {
        let model = Model::new(ModelConfig { grid_h: 4, grid_w: 4, latent_frames: 3, scheme, masking: MaskingMode::View, seed: 2, ..ModelConfig::default() })?;
        let (seq, prompt) = small_sequence(&model, 9, true)?;
        let mask = seq.view_mask.clone().expect("view mask attached");
        let out = model.forward_with_attention(&seq, 0.6, &prompt)?;
        ensure!(out.attention.len() == model.config.layers * model.config.heads, "missing attention maps");
        for map in &out.attention {
            maps += 1;
            let n = seq.len();
            for q in 0..n {
                let row = map.weights.row(q);
                max_row_err = max_row_err.max((row.iter().sum::<f64>() - 1.0).abs());
                for (k, &wgt) in row.iter().enumerate() {
                    if mask.token_blocked(&seq.layout, q, k) {
                        ensure!(wgt == 0.0, "layer {} head {}: blocked weight {wgt:e} at ({q},{k})", map.layer, map.head);
                    }
                }
            }
        }
    }
    ensure!(max_row_err < 1e-12, "row sum error {max_row_err:.3e}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.random_range(1..=3);
        let rand_pose = |rng: &mut ChaCha8Rng| PoseAngles::new(rng.random_range(-90.0..90.0), rng.random_range(-60.0..60.0), 0.0);
        let anchor = rand_pose(&mut rng);
        let refs: Vec<PoseAngles> = (0..n).map(|_| rand_pose(&mut rng)).collect();
        let d = |r: &PoseAngles| ((anchor.yaw - r.yaw).powi(2) + (anchor.pitch - r.pitch).powi(2)).sqrt();
        let mut best = 0;
        for j in 1..n {
            if d(&refs[j]) < d(&refs[best]) {
                best = j;
            }
        }
        ensure!(match_reference_view(&anchor, &refs)? == best, "pose matching disagrees with brute force");
    }
    Ok(outcome(true, format!("{maps} attention maps, row-sum error {max_row_err:.1e}; 1000 pose sets")))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Result<Outcome> {
    let field = |z: &Tensor, _t: f64| Ok(z.map(|v| -v));
    let err = |k: usize| -> Result<f64> {
        Ok((euler_integrate(&field, Tensor::filled(&[1], 1.0), k)?.item() - std::f64::consts::E).abs())
    };
    let e1 = err(1000)?;
    let e2 = err(2000)?;
    let ratio = e1 / e2;
    ensure!(e1 < 3e-3, "error at K=1000 is {e1:.3e}");
    ensure!((1.8..=2.2).contains(&ratio), "error ratio {ratio:.3}");
    Ok(outcome(true, format!("|z(0)-e| = {e1:.3e} at K=1000, halving ratio {ratio:.3}")))
}

// ---------------------------------------------------------------- 6

/// Embeds a frame as its per-channel means plus one.
struct ChannelMeans;

impl FaceExtractor for ChannelMeans {
    fn tag(&self) -> &str {
        "channel-means"
    }

    fn extract(&self, frame: &Tensor) -> Result<FaceEmbedding> {
        let c = frame.shape()[2];
        let mut acc = vec![0.0; c];
        for (i, v) in frame.data().iter().enumerate() {
            acc[i % c] += v;
        }
        let n = (frame.numel() / c) as f64;
        FaceEmbedding::new(acc.iter().map(|a| a / n + 1.0).collect(), "channel-means")
    }
}

fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn criterion_6() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let dim = rng.random_range(2..16);
        let refs: Vec<Vec<f64>> = (0..10).map(|_| gaussian_vec(&mut rng, dim)).collect();
        let frame = gaussian_vec(&mut rng, dim);
        let set = ReferenceSet::new(refs.iter().map(|r| FaceEmbedding::new(r.clone(), "x")).collect::<Result<_>>()?)?;
        let f = FaceEmbedding::new(frame.clone(), "x")?;
        let got = metrics::mvrc_frame(&f, &set)?;
        let want = refs.iter().map(|r| brute_cos(&frame, r)).sum::<f64>() / 10.0;
        worst = worst.max((got - want).abs());

        let mut perm: Vec<usize> = (0..10).collect();
        for i in (1..10).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = ReferenceSet::new(perm.iter().map(|&i| FaceEmbedding::new(refs[i].clone(), "x")).collect::<Result<_>>()?)?;
        ensure!(metrics::mvrc_frame(&f, &permuted)? == got, "reference permutation changed the score");

        let s = rng.random_range(0.01..100.0);
        let scaled = FaceEmbedding::new(frame.iter().map(|v| v * s).collect(), "x")?;
        let scaled_refs = ReferenceSet::new(refs.iter().map(|r| FaceEmbedding::new(r.iter().map(|v| v * s * 3.0).collect(), "x")).collect::<Result<_>>()?)?;
        let diff = (metrics::mvrc_frame(&scaled, &scaled_refs)? - got).abs();
        ensure!(diff <= 4.0 * f64::EPSILON, "positive scaling moved the score by {diff:e}");
    }

    let frames = Tensor::new(&[6, 4, 4, 3], gaussian_vec(&mut rng, 6 * 48))?;
    let refs: Vec<Vec<f64>> = (0..10).map(|_| gaussian_vec(&mut rng, 3)).collect();
    let set = ReferenceSet::new(refs.iter().map(|r| FaceEmbedding::new(r.clone(), "x")).collect::<Result<_>>()?)?;
    let report = metrics::mvrc_video(&frames, &set, &ChannelMeans, 2)?;
    let mut brute = Vec::new();
    for fi in (0..6).step_by(2) {
        let mut m = [0.0; 3];
        for p in 0..16 {
            for c in 0..3 {
                m[c] += frames.data()[fi * 48 + p * 3 + c];
            }
        }
        let e: Vec<f64> = m.iter().map(|v| v / 16.0 + 1.0).collect();
        brute.push(refs.iter().map(|r| brute_cos(&e, r)).sum::<f64>() / 10.0);
    }
    ensure!(report.per_frame.len() == brute.len(), "sampled {} frames, want {}", report.per_frame.len(), brute.len());
    for ((_, got), want) in report.per_frame.iter().zip(&brute) {
        worst = worst.max((got - want).abs());
    }
    let mean = brute.iter().sum::<f64>() / brute.len() as f64;
    worst = worst.max((report.mean - mean).abs());
    ensure!(worst < 1e-12, "max deviation from brute force {worst:.3e}");
    Ok(outcome(true, format!("200 reference sets + video, max deviation {worst:.2e}")))
}

// ---------------------------------------------------------------- 7

fn copy_paste_fixture() -> Vec<PoseAngles> {
    // two frozen views with tiny jitter, switching halfway
    (0..80)
        .map(|k| {
            let j = ((k * 37) % 11) as f64 * 0.2 - 1.0;
            if k < 40 {
                PoseAngles::new(-35.0 + j, 4.0 - j, 0.0)
            } else {
                PoseAngles::new(40.0 - j, -3.0 + j, 0.0)
            }
        })
        .collect()
}

fn smooth_arc_fixture() -> Vec<PoseAngles> {
    (0..81).map(|k| PoseAngles::new(-45.0 + 90.0 * k as f64 / 80.0, 0.0, 0.0)).collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q = gaussian_vec(rng, 4);
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn criterion_7() -> Result<Outcome> {
    let (cone, min_run) = (trajectory::DEFAULT_CONE_DEG, trajectory::DEFAULT_MIN_RUN);
    let cp = trajectory_stats(&build_trajectory(&copy_paste_fixture())?, cone, min_run)?;
    let arc = trajectory_stats(&build_trajectory(&smooth_arc_fixture())?, cone, min_run)?;
    ensure!(!cp.collapse_segments.is_empty(), "no collapse on the copy-paste fixture");
    ensure!(arc.collapse_segments.is_empty(), "collapse reported on the smooth arc");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for poses in [copy_paste_fixture(), smooth_arc_fixture()] {
        let pts = build_trajectory(&poses)?;
        let base = trajectory_stats(&pts, cone, min_run)?;
        for _ in 0..10 {
            let r = random_rotation(&mut rng);
            let rotated: Vec<TrajectoryPoint> = pts
                .iter()
                .map(|p| {
                    let d = p.direction;
                    let mut out = [0.0; 3];
                    for i in 0..3 {
                        out[i] = r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2];
                    }
                    TrajectoryPoint { direction: out, ..*p }
                })
                .collect();
            let s = trajectory_stats(&rotated, cone, min_run)?;
            for (a, b) in [(base.dispersion, s.dispersion), (base.smoothness, s.smoothness), (base.max_jump, s.max_jump)] {
                ensure!((a - b).abs() < 1e-9, "statistic moved by {:.3e} under rotation", (a - b).abs());
            }
            let spans = |st: &trajectory::TrajectoryStats| st.collapse_segments.iter().map(|c| (c.start, c.end)).collect::<Vec<_>>();
            ensure!(spans(&base) == spans(&s), "collapse segments changed under rotation");
        }
    }

    let pts = build_trajectory(&smooth_arc_fixture())?;
    for (k, p) in pts.iter().enumerate() {
        ensure!(p.time == k as f64 / 80.0, "time of frame {k} is {}", p.time);
    }
    Ok(outcome(true, format!("copy-paste: {} segment(s); arc: 0; rotation and time checks hold", cp.collapse_segments.len())))
}

// ---------------------------------------------------------------- 8

/// Predicates written directly from the filter thresholds.
fn oracle_coarse(r: &ClipRecord, q: f64) -> bool {
    r.coverage > 0.0 && r.quality >= q
}

fn oracle_clip(r: &ClipRecord, min_dur: f64, min_cov: f64) -> bool {
    r.duration >= min_dur && r.persons == 1 && r.coverage >= min_cov
}

fn oracle_pose(r: &ClipRecord) -> bool {
    if r.poses.is_empty() {
        return false;
    }
    let span = |f: fn(&PoseAngles) -> f64| {
        let v: Vec<f64> = r.poses.iter().map(f).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    span(|p| p.yaw) > 45.0 || span(|p| p.pitch) > 45.0
}

fn criterion_8() -> Result<Outcome> {
    let corpus = datapipe::synthetic_corpus(1000, 8);
    let cfg = PipelineConfig::default();
    let ids = |rs: &[&ClipRecord]| rs.iter().map(|r| r.clip_id.clone()).collect::<Vec<_>>();

    let all: Vec<&ClipRecord> = corpus.iter().collect();
    let want_coarse: Vec<&ClipRecord> = all.iter().copied().filter(|r| oracle_coarse(r, cfg.quality_threshold)).collect();
    let want_clip: Vec<&ClipRecord> = want_coarse.iter().copied().filter(|r| oracle_clip(r, cfg.min_duration, cfg.min_coverage)).collect();
    let want_pose: Vec<&ClipRecord> = want_clip.iter().copied().filter(|r| oracle_pose(r)).collect();

    let coarse = datapipe::coarse_filter(corpus.clone(), cfg.quality_threshold)?;
    let clip = datapipe::clip_filter(coarse.kept.clone(), cfg.min_duration, cfg.min_coverage)?;
    let pose = datapipe::pose_filter(clip.kept.clone());
    fn refs(v: &[ClipRecord]) -> Vec<&ClipRecord> {
        v.iter().collect()
    }
    ensure!(ids(&refs(&coarse.kept)) == ids(&want_coarse), "coarse stage differs from the oracle");
    ensure!(ids(&refs(&clip.kept)) == ids(&want_clip), "clip stage differs from the oracle");
    ensure!(ids(&refs(&pose.kept)) == ids(&want_pose), "pose stage differs from the oracle");

    let (kept, report) = datapipe::run_pipeline(corpus.clone(), &cfg)?;
    ensure!(report.stages[0].input == 1000, "report input {}", report.stages[0].input);
    for w in report.stages.windows(2) {
        ensure!(w[0].kept == w[1].input, "stage {} keeps {} but {} receives {}", w[0].stage, w[0].kept, w[1].stage, w[1].input);
    }
    for s in &report.stages {
        ensure!(s.input == s.kept + s.dropped.values().sum::<usize>(), "stage {} does not conserve counts", s.stage);
    }
    ensure!(report.stages.last().unwrap().kept == kept.len(), "final count mismatch");
    for r in &kept {
        let f = r.reference_frames.as_ref().expect("references chosen");
        ensure!(f.len() == cfg.num_refs, "clip {} has {} references", r.clip_id, f.len());
        for i in 0..f.len() {
            for j in i + 1..f.len() {
                let (a, b) = (&r.poses[f[i]], &r.poses[f[j]]);
                let gap = (a.yaw - b.yaw).abs().max((a.pitch - b.pitch).abs());
                ensure!(gap > 45.0, "clip {}: reference gap {gap:.1} deg", r.clip_id);
            }
        }
    }
    let counts: Vec<String> = report.stages.iter().map(|s| format!("{} {}->{}", s.stage, s.input, s.kept)).collect();
    Ok(outcome(true, counts.join(", ")))
}

// ---------------------------------------------------------------- 9

/// Single-clip memorisation setup: one head, interleaved axes, a short RoPE
/// base, time modulation, a learned video position table and a wide FFN,
/// trained with Adam over batches of 4 noise draws and a decayed tail.
fn overfit_run(seed: u64) -> Result<(f64, f64, Vec<(usize, f64)>)> {
    let example = synth::training_example(1, 2, 8, 64);
    let encoder = PatchEncoder::new(EncoderConfig::default())?;
    let mut model = Model::new(ModelConfig {
        heads: 1,
        rope_base: 100.0,
        rope_layout: AxisLayout::Interleaved,
        time_modulation: true,
        position_table: true,
        ffn_mult: 8,
        seed,
        ..ModelConfig::default()
    })?;
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adam,
        schedule: LrSchedule::Tail,
        lr: 0.01,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    };
    let seq = flow::prepare_sequence(&model, &encoder, &example, &cfg, 0)?;
    let prompt = PromptEmbedding::from_text(&example.prompt, model.config.prompt_len, model.config.width);
    let before = probe_loss(&model, &seq, &prompt, 32, 99)?;
    let curve = flow::train(&mut model, &encoder, &[example], &cfg, |_, _| {})?;
    let after = probe_loss(&model, &seq, &prompt, 32, 99)?;
    Ok((before, after, curve))
}

fn criterion_9() -> Result<Outcome> {
    let start = Instant::now();
    let (before, after, curve) = overfit_run(0)?;
    let (_, after_again, curve_again) = overfit_run(0)?;
    let elapsed = start.elapsed() / 2;
    let ratio = after / before;
    ensure!(curve == curve_again && after == after_again, "two runs with the same seed differ");
    ensure!(elapsed < Duration::from_secs(300), "one run took {elapsed:?}");
    ensure!(
        ratio < 0.05,
        "probe loss {before:.4} -> {after:.4}, ratio {ratio:.4} (target < 0.05), {elapsed:.1?} per run"
    );
    Ok(outcome(true, format!("probe loss {before:.4} -> {after:.4}, ratio {ratio:.4}, {elapsed:.1?} per run")))
}

// ---------------------------------------------------------------- 10

struct ProbeReport {
    mean_entropy: f64,
    collapse_segments: usize,
    final_loss: f64,
}

fn glyph_corpus(size: usize) -> Vec<TrainingExample> {
    (0..6).map(|id| synth::training_example(id, 100 + id, 8, size)).collect()
}

fn train_and_probe(scheme: RopeScheme, masking: MaskingMode, steps: usize) -> Result<ProbeReport> {
    let encoder = PatchEncoder::new(EncoderConfig::default())?;
    let mut model = Model::new(ModelConfig { scheme, masking, ..ModelConfig::default() })?;
    let corpus = glyph_corpus(model.config.grid_h * encoder.config().spatial_compression);
    let cfg = TrainConfig { steps, scheme, masking, seed: 10, ..TrainConfig::default() };
    let curve = flow::train(&mut model, &encoder, &corpus, &cfg, |_, _| {})?;
    let tail = &curve[curve.len().saturating_sub(100)..];
    let final_loss = tail.iter().map(|c| c.1).sum::<f64>() / tail.len() as f64;

    let mut entropies = Vec::new();
    let mut collapse = 0;
    for id in 20..23u64 {
        let size = model.config.grid_h * encoder.config().spatial_compression;
        let references = synth::reference_poses(id)
            .iter()
            .map(|p| encoder.encode_reference(&synth::render_head(id, p, size), None))
            .collect::<Result<Vec<_>>>()?;
        let conditions = SampleConditions {
            references,
            prompt: PromptEmbedding::from_text("a person slowly turning their head", model.config.prompt_len, model.config.width),
            latent_frames: model.config.latent_frames,
            fps: 16.0,
            view_poses: None,
        };
        for t in [0.25, 0.5, 0.75] {
            let seq = flow::probe_sequence(&model, &conditions, t, id)?;
            let out = model.forward_with_attention(&seq, t, &conditions.prompt)?;
            let series = metrics::concentration_from_weights(&metrics::mean_weights(&out.attention)?, &seq.layout)?;
            entropies.extend(series.entropy);
        }
        let latents = flow::sample(&model, &conditions, 20, id)?;
        let video = encoder.decode_video(&latents.latents)?;
        let per = video.numel() / video.shape()[0];
        let poses: Vec<PoseAngles> = (0..video.shape()[0])
            .filter_map(|k| {
                let frame = Tensor::new(&video.shape()[1..], video.data()[k * per..(k + 1) * per].to_vec()).ok()?;
                synth::estimate_pose(&frame)
            })
            .collect();
        if poses.len() >= 2 {
            // 8-frame clips: the run length is scaled down from the 81-frame default
            let stats = trajectory_stats(&build_trajectory(&poses)?, trajectory::DEFAULT_CONE_DEG, 3)?;
            collapse += stats.collapse_segments.len();
        }
    }
    Ok(ProbeReport {
        mean_entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
        collapse_segments: collapse,
        final_loss,
    })
}

fn criterion_10() -> Result<Outcome> {
    let steps = std::env::var("MVREF_PROBE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let start = Instant::now();
    let base = train_and_probe(RopeScheme::Vanilla, MaskingMode::None, steps)?;
    let mitigated = train_and_probe(RopeScheme::RdRope, MaskingMode::Region, steps)?;
    let seen = |ok: bool| if ok { "observed" } else { "not observed" };
    let entropy_up = seen(mitigated.mean_entropy > base.mean_entropy);
    let fewer_collapses = seen(mitigated.collapse_segments < base.collapse_segments);
    Ok(outcome(
        true,
        format!(
            "reported only, {steps} steps each, {:.0?}: B entropy {:.4} collapses {} loss {:.3}; B+R+M entropy {:.4} collapses {} loss {:.3}; higher entropy {}, fewer collapses {}",
            start.elapsed(),
            base.mean_entropy,
            base.collapse_segments,
            base.final_loss,
            mitigated.mean_entropy,
            mitigated.collapse_segments,
            mitigated.final_loss,
            entropy_up,
            fewer_collapses
        ),
    ))
}

fn main() {
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [(usize, &str, fn() -> Result<Outcome>); 10] = [
        (1, "rope relative-position suite", criterion_1),
        (2, "rd-rope structure", criterion_2),
        (3, "gradient fidelity", criterion_3),
        (4, "masking correctness", criterion_4),
        (5, "sampler convergence", criterion_5),
        (6, "mvrc oracle equivalence", criterion_6),
        (7, "trajectory analytics", criterion_7),
        (8, "datapipe oracle equivalence", criterion_8),
        (9, "toy-scale overfit", criterion_9),
        (10, "copy-paste probe", criterion_10),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        println!("criterion {n:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
