//! Trainable encoders: the global 3D ViT, the 2D-enhanced 3D (2E3) encoder
//! with slice-guided patch scoring, the report text encoder, and the
//! projection heads into the shared latent space.
//!
//! Everything here is batched: a leading `B` axis runs through every tensor.

mod head;
mod scoring;
mod slice2d;
mod text;
mod twoe3;
mod vit3d;

pub use head::{project_to_shared, HeadId, ProjectionHead};
pub use scoring::PatchScorer;
pub use slice2d::SliceEncoder;
pub use text::TextEncoder;
pub use twoe3::Encoder2e3;
pub use vit3d::{PatchEmbed3d, Vit3d};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::volumetrics::{patchify, PatchSequence, SliceStack, Volume};

/// Patch tokens of a batch plus the separately stored CLS summary.
#[derive(Debug, Clone)]
pub struct VisionTokens {
    /// `(B, N_p, d_v)`; CLS is not included.
    pub tokens: Tensor,
    /// `(B, d_v)`.
    pub cls: Tensor,
    pub grid_dims: [usize; 3],
}

impl VisionTokens {
    pub fn num_patches(&self) -> usize {
        self.grid_dims.iter().product()
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.tokens.dims3()?.2)
    }

    /// `(B, 1 + N_p, d_v)` with CLS at position 0.
    pub(crate) fn with_cls(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.cls.unsqueeze(1)?, &self.tokens], 1)?)
    }

    pub(crate) fn from_with_cls(x: &Tensor, grid_dims: [usize; 3]) -> Result<Self> {
        let n = x.dims3()?.1;
        Ok(Self {
            cls: x.narrow(1, 0, 1)?.squeeze(1)?,
            tokens: x.narrow(1, 1, n - 1)?,
            grid_dims,
        })
    }
}

/// Per-slice CLS features `(B, N_s, d_v)`.
#[derive(Debug, Clone)]
pub struct SliceFeatures {
    pub features: Tensor,
}

/// Per-patch importance `(B, N_p)`, each in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct PatchScores {
    pub scores: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `(B, L, d_v)`; position 0 is CLS.
    pub tokens: Tensor,
    /// `(B, d_v)`.
    pub cls: Tensor,
    /// `true` marks a real (non-padding) position.
    pub mask: Vec<Vec<bool>>,
}

/// Unit-norm rows `(B, d_l)`.
#[derive(Debug, Clone)]
pub struct LatentEmbedding {
    pub vectors: Tensor,
}

/// Encoder-ready arrays for one volume: 3D patches and 2D slice patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVolume {
    /// `N_p × patch_len`.
    pub patches: Vec<f32>,
    /// `N_s × n_slice_patches × slice_patch_len`.
    pub slice_patches: Vec<f32>,
    pub num_patches: usize,
    pub patch_len: usize,
    pub num_slices: usize,
    pub slice_tokens: usize,
    pub slice_patch_len: usize,
}

/// Flattens each slice of `stack` into a `(W/p)·(H/p)` grid of `p×p` patches.
pub fn slice_patches(stack: &SliceStack, patch: usize) -> Result<(Vec<f32>, usize, usize)> {
    let [w, h, c] = stack.slice_dims();
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::Config(format!(
            "slice {w}x{h} not divisible by 2D patch size {patch}"
        )));
    }
    let mut out = Vec::with_capacity(stack.len() * w * h * c);
    for s in stack.slices() {
        let plane = Volume::new(s.clone(), [1, w, h, c], false, "")?;
        let p = patchify(&plane, [1, w / patch, h / patch])?;
        out.extend_from_slice(p.tokens());
    }
    Ok((out, (w / patch) * (h / patch), patch * patch * c))
}

impl PreparedVolume {
    pub fn new(patches: &PatchSequence, slices: &SliceStack, slice_patch: usize) -> Result<Self> {
        let (slice_data, slice_tokens, slice_patch_len) = slice_patches(slices, slice_patch)?;
        Ok(Self {
            patches: patches.tokens().to_vec(),
            slice_patches: slice_data,
            num_patches: patches.num_patches(),
            patch_len: patches.token_len(),
            num_slices: slices.len(),
            slice_tokens,
            slice_patch_len,
        })
    }
}

/// `(B, N_p, patch_len)` tensor from a batch of prepared volumes.
pub fn patch_tensor(batch: &[&PreparedVolume], dtype: DType) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let mut data = Vec::with_capacity(batch.len() * first.patches.len());
    for p in batch {
        if p.patches.len() != first.patches.len() {
            return Err(Error::Shape("ragged patch batch".into()));
        }
        data.extend_from_slice(&p.patches);
    }
    Ok(Tensor::from_vec(
        data,
        (batch.len(), first.num_patches, first.patch_len),
        &Device::Cpu,
    )?
    .to_dtype(dtype)?)
}

/// `(B, N_s, n_tokens, patch_len)` tensor of slice patches.
pub fn slice_tensor(batch: &[&PreparedVolume], dtype: DType) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let mut data = Vec::with_capacity(batch.len() * first.slice_patches.len());
    for p in batch {
        if p.slice_patches.len() != first.slice_patches.len() {
            return Err(Error::Shape("ragged slice batch".into()));
        }
        data.extend_from_slice(&p.slice_patches);
    }
    Ok(Tensor::from_vec(
        data,
        (
            batch.len(),
            first.num_slices,
            first.slice_tokens,
            first.slice_patch_len,
        ),
        &Device::Cpu,
    )?
    .to_dtype(dtype)?)
}
