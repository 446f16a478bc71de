//! Fixed linear patch encoder standing in for a video VAE.
//!
//! A patch of `c_t` frames by `c_s x c_s` pixels by `channels` is flattened
//! (frame, row, column, channel order) and projected onto `latent_dim`
//! rows: the lowest-frequency separable DCT-II basis functions, extended by
//! seeded Gaussian rows when `latent_dim` exceeds the patch volume, then
//! mixed by a seeded orthogonal matrix. Decoding applies the pseudo-inverse.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_region_mask, RegionMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub temporal_compression: usize,
    pub spatial_compression: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            temporal_compression: 4,
            spatial_compression: 8,
            channels: 3,
            latent_dim: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn patch_volume(&self) -> usize {
        self.temporal_compression * self.spatial_compression * self.spatial_compression * self.channels
    }
}

/// `[groups, grid_h, grid_w, latent_dim]` latents of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub latents: Tensor,
    pub fps: f64,
    pub source_frames: usize,
}

impl LatentVideo {
    pub fn groups(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latents.shape()[1], self.latents.shape()[2])
    }

    pub fn latent_dim(&self) -> usize {
        self.latents.shape()[3]
    }

    /// Tokens as `[groups * grid_h * grid_w, latent_dim]`.
    pub fn token_matrix(&self) -> Tensor {
        let d = self.latent_dim();
        let n = self.latents.numel() / d;
        self.latents.clone().reshape(&[n, d]).expect("token view")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOrigin {
    Clean,
    RegionMasked,
}

/// `[grid_h, grid_w, latent_dim]` latents of one reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLatent {
    pub latents: Tensor,
    pub origin: LatentOrigin,
}

impl ReferenceLatent {
    pub fn grid(&self) -> (usize, usize) {
        (self.latents.shape()[0], self.latents.shape()[1])
    }

    pub fn token_matrix(&self) -> Tensor {
        let s = self.latents.shape();
        self.latents.clone().reshape(&[s[0] * s[1], s[2]]).expect("token view")
    }
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    config: EncoderConfig,
    /// `[latent_dim, volume]`
    basis: DMatrix<f64>,
    /// `[volume, latent_dim]`
    pinv: DMatrix<f64>,
}

fn dct(n: usize, k: usize, i: usize) -> f64 {
    let nf = n as f64;
    let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
    a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos()
}

impl PatchEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let (ct, cs, ch, d) = (
            config.temporal_compression,
            config.spatial_compression,
            config.channels,
            config.latent_dim,
        );
        if ct == 0 || cs == 0 || ch == 0 || d == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {config:?}")));
        }
        let vol = config.patch_volume();
        let mut freqs: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(vol);
        for kt in 0..ct {
            for ky in 0..cs {
                for kx in 0..cs {
                    for c in 0..ch {
                        freqs.push((kt, ky, kx, c));
                    }
                }
            }
        }
        freqs.sort_by_key(|&(kt, ky, kx, c)| (kt + ky + kx, kt, ky, kx, c));

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut raw = DMatrix::<f64>::zeros(d, vol);
        for row in 0..d {
            if let Some(&(kt, ky, kx, c)) = freqs.get(row) {
                for t in 0..ct {
                    for y in 0..cs {
                        for x in 0..cs {
                            let col = ((t * cs + y) * cs + x) * ch + c;
                            raw[(row, col)] = dct(ct, kt, t) * dct(cs, ky, y) * dct(cs, kx, x);
                        }
                    }
                }
            } else {
                for col in 0..vol {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    raw[(row, col)] = z / (vol as f64).sqrt();
                }
            }
        }
        let gauss = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let q = gauss.qr().q();
        let basis = q * raw;
        let pinv = basis
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("encoder pseudo-inverse failed: {e}")))?;
        Ok(Self { config, basis, pinv })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_frame_dims(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let cs = self.config.spatial_compression;
        if h % cs != 0 || w % cs != 0 || c != self.config.channels || h == 0 || w == 0 {
            return Err(Error::shape(
                "encode",
                &[h, w, c],
                &[cs, cs, self.config.channels],
            ));
        }
        Ok(())
    }

    /// Encodes `[frames, H, W, C]` pixels; the last group is zero-padded.
    pub fn encode_video(&self, frames: &Tensor, fps: f64) -> Result<LatentVideo> {
        let [f, h, w, c] = *frames.shape() else {
            return Err(Error::shape("encode_video", frames.shape(), &[0, 0, 0, 0]));
        };
        if f == 0 {
            return Err(Error::InvalidArgument("cannot encode an empty clip".into()));
        }
        self.check_frame_dims(h, w, c)?;
        let (ct, cs, d) = (
            self.config.temporal_compression,
            self.config.spatial_compression,
            self.config.latent_dim,
        );
        let groups = f.div_ceil(ct);
        let (gh, gw) = (h / cs, w / cs);
        let vol = self.config.patch_volume();
        let src = frames.data();
        let mut out = Vec::with_capacity(groups * gh * gw * d);
        let mut patch = vec![0.0; vol];
        for g in 0..groups {
            for py in 0..gh {
                for px in 0..gw {
                    patch.iter_mut().for_each(|v| *v = 0.0);
                    for t in 0..ct {
                        let frame = g * ct + t;
                        if frame >= f {
                            break;
                        }
                        for y in 0..cs {
                            let row = (frame * h + py * cs + y) * w + px * cs;
                            let dst = ((t * cs + y) * cs) * c;
                            patch[dst..dst + cs * c].copy_from_slice(&src[row * c..(row + cs) * c]);
                        }
                    }
                    for r in 0..d {
                        let mut acc = 0.0;
                        for (k, p) in patch.iter().enumerate() {
                            acc += self.basis[(r, k)] * p;
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Ok(LatentVideo {
            latents: Tensor::new(&[groups, gh, gw, d], out)?,
            fps,
            source_frames: f,
        })
    }

    /// Encodes one `[H, W, C]` image as a single-frame clip, after applying
    /// `mask` when given.
    pub fn encode_reference(&self, image: &Tensor, mask: Option<&RegionMask>) -> Result<ReferenceLatent> {
        let [h, w, c] = *image.shape() else {
            return Err(Error::shape("encode_reference", image.shape(), &[0, 0, 0]));
        };
        let (pixels, origin) = match mask {
            Some(m) => (apply_region_mask(image, m)?, LatentOrigin::RegionMasked),
            None => (image.clone(), LatentOrigin::Clean),
        };
        let clip = pixels.reshape(&[1, h, w, c])?;
        let v = self.encode_video(&clip, 0.0)?;
        let (gh, gw) = v.grid();
        Ok(ReferenceLatent {
            latents: v.latents.reshape(&[gh, gw, self.config.latent_dim])?,
            origin,
        })
    }

    /// Pseudo-inverse reconstruction as `[groups * c_t, H, W, C]` pixels.
    pub fn decode_video(&self, latents: &Tensor) -> Result<Tensor> {
        let [groups, gh, gw, d] = *latents.shape() else {
            return Err(Error::shape("decode_video", latents.shape(), &[0, 0, 0, 0]));
        };
        if d != self.config.latent_dim {
            return Err(Error::shape("decode_video", latents.shape(), &[self.config.latent_dim]));
        }
        let (ct, cs, c) = (
            self.config.temporal_compression,
            self.config.spatial_compression,
            self.config.channels,
        );
        let (h, w) = (gh * cs, gw * cs);
        let frames = groups * ct;
        let mut out = vec![0.0; frames * h * w * c];
        let vol = self.config.patch_volume();
        let mut patch = vec![0.0; vol];
        for g in 0..groups {
            for py in 0..gh {
                for px in 0..gw {
                    let z = &latents.data()[((g * gh + py) * gw + px) * d..][..d];
                    for (k, p) in patch.iter_mut().enumerate() {
                        *p = (0..d).map(|r| self.pinv[(k, r)] * z[r]).sum();
                    }
                    for t in 0..ct {
                        let frame = g * ct + t;
                        for y in 0..cs {
                            let row = (frame * h + py * cs + y) * w + px * cs;
                            let src = ((t * cs + y) * cs) * c;
                            out[row * c..(row + cs) * c].copy_from_slice(&patch[src..src + cs * c]);
                        }
                    }
                }
            }
        }
        Tensor::new(&[frames, h, w, c], out)
    }
}
