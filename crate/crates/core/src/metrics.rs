//! Multi-view reference consistency and attention-concentration statistics.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::AttentionMap;
use crate::rope::SequenceLayout;
use crate::synth;
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor};

pub const DEFAULT_REFERENCE_SET_SIZE: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceEmbedding {
    values: Vec<f64>,
    extractor: String,
}

impl FaceEmbedding {
    pub fn new(values: Vec<f64>, extractor: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding has non-finite entries".into()));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroEmbedding);
        }
        Ok(Self {
            values,
            extractor: extractor.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn extractor(&self) -> &str {
        &self.extractor
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine(a: &FaceEmbedding, b: &FaceEmbedding) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::shape("cosine", &[a.values.len()], &[b.values.len()]));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    embeddings: Vec<FaceEmbedding>,
}

impl ReferenceSet {
    pub fn new(embeddings: Vec<FaceEmbedding>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::InvalidArgument("reference set is empty".into()));
        }
        Ok(Self { embeddings })
    }

    pub fn embeddings(&self) -> &[FaceEmbedding] {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Mean cosine similarity of `frame` against every reference.
pub fn mvrc_frame(frame: &FaceEmbedding, refs: &ReferenceSet) -> Result<f64> {
    let mut sims = refs
        .embeddings
        .iter()
        .map(|r| cosine(frame, r))
        .collect::<Result<Vec<_>>>()?;
    // summing in sorted order makes the result independent of reference order
    sims.sort_by(f64::total_cmp);
    Ok(sims.iter().sum::<f64>() / refs.len() as f64)
}

pub trait FaceExtractor {
    fn tag(&self) -> &str;

    /// Embedding of the face in an `[H, W, C]` frame.
    fn extract(&self, frame: &Tensor) -> Result<FaceEmbedding>;
}

/// Reads the identity intensities of a synthetic head directly.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticExtractor;

impl FaceExtractor for SyntheticExtractor {
    fn tag(&self) -> &str {
        "synthetic"
    }

    fn extract(&self, frame: &Tensor) -> Result<FaceEmbedding> {
        let sig = synth::read_identity(frame)
            .ok_or_else(|| Error::Extractor("no synthetic head visible".into()))?;
        FaceEmbedding::new(sig.to_vec(), self.tag())
    }
}

/// Runs `program <frame.bin> <embedding.bin>` over the flat tensor format.
/// The program reads an `[H, W, C]` tensor and writes a rank-1 embedding.
#[derive(Clone, Debug)]
pub struct ExecExtractor {
    program: PathBuf,
    tag: String,
}

static EXEC_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ExecExtractor {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        let program = program.into();
        let tag = format!("exec:{}", program.display());
        Self { program, tag }
    }
}

impl FaceExtractor for ExecExtractor {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn extract(&self, frame: &Tensor) -> Result<FaceEmbedding> {
        let id = EXEC_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("mvref-extract-{}-{id}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let input = dir.join("frame.bin");
        let output = dir.join("embedding.bin");
        let result = (|| {
            write_tensor_file(&input, frame)?;
            let status = Command::new(&self.program)
                .arg(&input)
                .arg(&output)
                .output()
                .map_err(|e| Error::Extractor(format!("{}: {e}", self.program.display())))?;
            if !status.status.success() {
                let stderr = String::from_utf8_lossy(&status.stderr);
                return Err(Error::Extractor(format!(
                    "{} exited with {}: {}",
                    self.program.display(),
                    status.status,
                    stderr.trim()
                )));
            }
            let emb = read_tensor_file(&output)?;
            FaceEmbedding::new(emb.into_data(), self.tag.clone())
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}

/// Parses `synthetic` or `exec:<path>`.
pub fn extractor_from_spec(spec: &str) -> Result<Box<dyn FaceExtractor>> {
    if spec == "synthetic" {
        return Ok(Box::new(SyntheticExtractor));
    }
    match spec.strip_prefix("exec:") {
        Some(path) if !path.is_empty() => Ok(Box::new(ExecExtractor::new(path))),
        _ => Err(Error::Config(format!("unknown extractor {spec:?}; use synthetic or exec:<path>"))),
    }
}

pub fn sampled_frame_indices(frames: usize, stride: usize) -> Vec<usize> {
    (0..frames).step_by(stride.max(1)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MvrcReport {
    /// `(frame index, score)` for frames with a valid embedding.
    pub per_frame: Vec<(usize, f64)>,
    /// `(frame index, reason)` for frames where extraction failed.
    pub skipped: Vec<(usize, String)>,
    pub mean: f64,
}

impl MvrcReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "frame_index,mvrc")?;
        for (i, s) in &self.per_frame {
            writeln!(f, "{i},{s}")?;
        }
        writeln!(f, "mean,{}", self.mean)?;
        f.flush()?;
        Ok(())
    }
}

/// Mean frame score over every `stride`-th frame of `[F, H, W, C]` pixels.
/// Frames whose extraction fails are skipped.
pub fn mvrc_video(
    frames: &Tensor,
    refs: &ReferenceSet,
    extractor: &dyn FaceExtractor,
    stride: usize,
) -> Result<MvrcReport> {
    let [f, h, w, c] = *frames.shape() else {
        return Err(Error::shape("mvrc_video", frames.shape(), &[0, 0, 0, 0]));
    };
    if stride == 0 {
        return Err(Error::InvalidArgument("frame stride must be positive".into()));
    }
    let per = h * w * c;
    let mut per_frame = Vec::new();
    let mut skipped = Vec::new();
    for i in sampled_frame_indices(f, stride) {
        let frame = Tensor::new(&[h, w, c], frames.data()[i * per..(i + 1) * per].to_vec())?;
        match extractor.extract(&frame) {
            Ok(e) => per_frame.push((i, mvrc_frame(&e, refs)?)),
            Err(err) => skipped.push((i, err.to_string())),
        }
    }
    if per_frame.is_empty() {
        let diagnostics = skipped
            .iter()
            .map(|(i, r)| format!("frame {i}: {r}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::NoFace {
            frames: skipped.len(),
            diagnostics,
        });
    }
    let mean = per_frame.iter().map(|(_, s)| s).sum::<f64>() / per_frame.len() as f64;
    Ok(MvrcReport {
        per_frame,
        skipped,
        mean,
    })
}

/// Per video latent: share of reference-directed attention landing on each
/// reference block, and the entropy of those shares.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationSeries {
    pub fractions: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
}

impl ConcentrationSeries {
    pub fn mean_entropy(&self) -> f64 {
        self.entropy.iter().sum::<f64>() / self.entropy.len().max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let n = self.fractions.first().map_or(0, Vec::len);
        let header: Vec<String> = (1..=n).map(|j| format!("p_{j}")).collect();
        writeln!(f, "latent_index,{},entropy", header.join(","))?;
        for (i, (p, e)) in self.fractions.iter().zip(&self.entropy).enumerate() {
            let cells: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{i},{},{e}", cells.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn attention_concentration(map: &AttentionMap, layout: &SequenceLayout) -> Result<ConcentrationSeries> {
    concentration_from_weights(&map.weights, layout)
}

/// As [`attention_concentration`], over a bare `[L, L]` weight matrix.
pub fn concentration_from_weights(weights: &Tensor, layout: &SequenceLayout) -> Result<ConcentrationSeries> {
    let n = layout.len();
    if weights.shape() != [n, n] {
        return Err(Error::shape("attention_concentration", weights.shape(), &[n, n]));
    }
    let refs = layout.num_refs();
    let mut fractions = Vec::with_capacity(layout.latent_frames);
    let mut entropy = Vec::with_capacity(layout.latent_frames);
    for i in 0..layout.latent_frames {
        let mut mass = vec![0.0; refs];
        for q in layout.latent_range(i) {
            let row = weights.row(q);
            for (j, m) in mass.iter_mut().enumerate() {
                *m += layout.ref_range(j).map(|k| row[k]).sum::<f64>();
            }
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "video latent {i} puts no attention on any reference"
            )));
        }
        let p: Vec<f64> = mass.iter().map(|m| m / total).collect();
        let h = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        entropy.push(h.max(0.0));
        fractions.push(p);
    }
    Ok(ConcentrationSeries { fractions, entropy })
}

/// Elementwise mean of several equally shaped attention maps.
pub fn mean_weights(maps: &[AttentionMap]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attention maps to average".into()))?;
    let mut acc = first.weights.clone();
    for m in &maps[1..] {
        acc = acc.zip_map(&m.weights, |a, b| a + b)?;
    }
    let k = maps.len() as f64;
    Ok(acc.map(|v| v / k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::PoseAngles;
    use crate::rope::{assign_coordinates, LayoutRequest, RopeConfig, RopeScheme};

    fn emb(v: &[f64]) -> FaceEmbedding {
        FaceEmbedding::new(v.to_vec(), "test").unwrap()
    }

    #[test]
    fn cosine_cases() {
        let a = emb(&[1.0, 2.0, -1.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&a, &emb(&[3.0, 6.0, -3.0])).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(FaceEmbedding::new(vec![0.0; 3], "t"), Err(Error::ZeroEmbedding)));
        assert!(cosine(&a, &emb(&[1.0])).is_err());
    }

    #[test]
    fn frame_score_arithmetic() {
        let refs = ReferenceSet::new(vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
        assert!((mvrc_frame(&emb(&[1.0, 0.0]), &refs).unwrap() - 0.5).abs() < 1e-15);
        let same = ReferenceSet::new(vec![emb(&[2.0, 1.0]); 4]).unwrap();
        assert!((mvrc_frame(&emb(&[2.0, 1.0]), &same).unwrap() - 1.0).abs() < 1e-15);
        assert!(ReferenceSet::new(vec![]).is_err());
    }

    #[test]
    fn stride_enumeration() {
        assert_eq!(sampled_frame_indices(5, 2), vec![0, 2, 4]);
        assert_eq!(sampled_frame_indices(5, 1), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn video_skips_faceless_frames() {
        let pose = PoseAngles::new(10.0, 0.0, 0.0);
        let face = synth::render_head(4, &pose, 32);
        let mut data = face.data().to_vec();
        data.extend(std::iter::repeat_n(0.0, face.numel()));
        let clip = Tensor::new(&[2, 32, 32, 3], data).unwrap();
        let refs = ReferenceSet::new(vec![SyntheticExtractor.extract(&face).unwrap()]).unwrap();
        let r = mvrc_video(&clip, &refs, &SyntheticExtractor, 1).unwrap();
        assert_eq!(r.per_frame.len(), 1);
        assert_eq!(r.skipped.len(), 1);
        assert!((r.mean - 1.0).abs() < 1e-12);

        let blank = Tensor::zeros(&[3, 32, 32, 3]);
        match mvrc_video(&blank, &refs, &SyntheticExtractor, 1) {
            Err(Error::NoFace { frames, .. }) => assert_eq!(frames, 3),
            other => panic!("expected no-face, got {other:?}"),
        }
    }

    #[test]
    fn extractor_spec_parsing() {
        assert_eq!(extractor_from_spec("synthetic").unwrap().tag(), "synthetic");
        assert_eq!(extractor_from_spec("exec:/bin/x").unwrap().tag(), "exec:/bin/x");
        assert!(extractor_from_spec("exec:").is_err());
        assert!(extractor_from_spec("arcface").is_err());
    }

    fn layout(n: usize) -> SequenceLayout {
        let cfg = RopeConfig::new(6, 1, 2, n).unwrap();
        assign_coordinates(
            &LayoutRequest {
                latent_frames: 2,
                grid_h: 1,
                grid_w: 2,
                num_refs: n,
                scheme: RopeScheme::RdRope,
            },
            &cfg,
        )
        .unwrap()
    }

    #[test]
    fn concentration_uniform_and_one_hot() {
        let lay = layout(3);
        let n = lay.len();
        let uniform = Tensor::filled(&[n, n], 1.0 / n as f64);
        let s = concentration_from_weights(&uniform, &lay).unwrap();
        for (p, e) in s.fractions.iter().zip(&s.entropy) {
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
            assert!((e - 3f64.ln()).abs() < 1e-12);
        }
        let mut one_hot = Tensor::zeros(&[n, n]);
        for q in 0..n {
            one_hot.data_mut()[q * n + lay.ref_range(0).start] = 1.0;
        }
        let s = concentration_from_weights(&one_hot, &lay).unwrap();
        assert_eq!(s.fractions[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(s.entropy, vec![0.0, 0.0]);
    }

    #[test]
    fn concentration_manual_two_by_two() {
        // 2 latents of 2 tokens, 2 references of 2 tokens: 8 tokens.
        let lay = layout(2);
        let n = lay.len();
        assert_eq!(n, 8);
        let mut w = Tensor::zeros(&[n, n]);
        let rows = [
            [0.1, 0.1, 0.1, 0.1, 0.2, 0.1, 0.2, 0.1],
            [0.0, 0.2, 0.2, 0.0, 0.1, 0.1, 0.3, 0.1],
            [0.3, 0.0, 0.0, 0.3, 0.3, 0.0, 0.1, 0.0],
            [0.2, 0.2, 0.2, 0.2, 0.05, 0.05, 0.05, 0.05],
        ];
        for (q, r) in rows.iter().enumerate() {
            w.data_mut()[q * n..q * n + n].copy_from_slice(r);
        }
        let s = concentration_from_weights(&w, &lay).unwrap();
        let a = (0.2 + 0.1 + 0.1 + 0.1, 0.2 + 0.1 + 0.3 + 0.1);
        let p0 = a.0 / (a.0 + a.1);
        assert!((s.fractions[0][0] - p0).abs() < 1e-12);
        let b = (0.3 + 0.0 + 0.05 + 0.05, 0.1 + 0.0 + 0.05 + 0.05);
        let p1 = b.0 / (b.0 + b.1);
        assert!((s.fractions[1][0] - p1).abs() < 1e-12);
        let h = -(p1 * p1.ln() + (1.0 - p1) * (1.0 - p1).ln());
        assert!((s.entropy[1] - h).abs() < 1e-12);
        assert!(concentration_from_weights(&Tensor::zeros(&[3, 3]), &lay).is_err());
    }
}
