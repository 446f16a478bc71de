use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::encoder::{LatentVideo, ReferenceLatent};
use crate::error::{Error, Result};
use crate::masking::ViewAttentionMask;
use crate::rope::{assign_coordinates, LayoutRequest, RopeConfig, RopeCoordinate, RopeScheme, SequenceLayout, MAX_REFS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenGroup {
    Video(usize),
    Reference(usize),
}

/// Prompt stub: `[len, dim]` unit-normal rows seeded by a hash of the text.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub rows: Tensor,
}

impl PromptEmbedding {
    pub const DEFAULT_LEN: usize = 4;

    pub fn from_text(text: &str, len: usize, dim: usize) -> Self {
        let digest = Sha256::digest(text.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let data = (0..len * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            rows: Tensor::new(&[len, dim], data).expect("prompt shape"),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// `[L, d_latent]` tokens in `[video..., ref_1..., ref_n...]` order with their
/// coordinates and an optional view mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub layout: SequenceLayout,
    pub view_mask: Option<ViewAttentionMask>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_video_tokens(&self) -> usize {
        self.layout.num_video_tokens()
    }

    pub fn latent_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn group(&self, token: usize) -> TokenGroup {
        let nv = self.layout.num_video_tokens();
        if token < nv {
            TokenGroup::Video(token / self.layout.tokens_per_frame())
        } else {
            let per = self.layout.tokens_per_frame();
            TokenGroup::Reference((token - nv) / per)
        }
    }

    pub fn coordinate(&self, token: usize) -> RopeCoordinate {
        *self.layout.coordinates().nth(token).expect("token index")
    }

    pub fn video_tokens(&self) -> Tensor {
        let d = self.latent_dim();
        let nv = self.num_video_tokens();
        Tensor::new(&[nv, d], self.tokens.data()[..nv * d].to_vec()).expect("video slice")
    }

    /// Same conditioning with the video block replaced by `video` (`[nv, d]`).
    pub fn with_video_tokens(&self, video: &Tensor) -> Result<Self> {
        let d = self.latent_dim();
        let nv = self.num_video_tokens();
        if video.shape() != [nv, d] {
            return Err(Error::shape("with_video_tokens", video.shape(), &[nv, d]));
        }
        let mut out = self.clone();
        out.tokens.data_mut()[..nv * d].copy_from_slice(video.data());
        Ok(out)
    }

    pub fn with_view_mask(mut self, mask: ViewAttentionMask) -> Result<Self> {
        // Validate against the layout up front.
        mask.additive(&self.layout)?;
        self.view_mask = Some(mask);
        Ok(self)
    }

    /// Checks internal consistency.
    pub fn validate(&self) -> Result<()> {
        let (l, _) = self.tokens.dims2()?;
        if l != self.layout.len() {
            return Err(Error::shape("token_sequence", &[l], &[self.layout.len()]));
        }
        if let Some(m) = &self.view_mask {
            if m.num_latents() != self.layout.latent_frames || m.num_refs != self.layout.num_refs() {
                return Err(Error::shape(
                    "token_sequence",
                    &[m.num_latents(), m.num_refs],
                    &[self.layout.latent_frames, self.layout.num_refs()],
                ));
            }
        }
        Ok(())
    }
}

pub fn concat_sequence(
    video: &LatentVideo,
    refs: &[ReferenceLatent],
    scheme: RopeScheme,
    rope: &RopeConfig,
) -> Result<TokenSequence> {
    if refs.is_empty() || refs.len() > MAX_REFS {
        return Err(Error::Config(format!(
            "number of references must be in 1..={MAX_REFS}, got {}",
            refs.len()
        )));
    }
    let (gh, gw) = video.grid();
    let d = video.latent_dim();
    for r in refs {
        let s = r.latents.shape();
        if s != [gh, gw, d] {
            return Err(Error::shape("concat_sequence", s, &[gh, gw, d]));
        }
    }
    let layout = assign_coordinates(
        &LayoutRequest {
            latent_frames: video.groups(),
            grid_h: gh,
            grid_w: gw,
            num_refs: refs.len(),
            scheme,
        },
        rope,
    )?;
    let mut data = video.latents.data().to_vec();
    for r in refs {
        data.extend_from_slice(r.latents.data());
    }
    let tokens = Tensor::new(&[layout.len(), d], data)?;
    Ok(TokenSequence {
        tokens,
        layout,
        view_mask: None,
    })
}
