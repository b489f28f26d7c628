use candle_core::Tensor;

use super::VisionTokens;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TransformerStack};
use crate::params::{Init, ParamStore};

/// Linear patch embedding with a learned 3D positional table (sin/cos
/// initialised) and CLS vector.
#[derive(Debug, Clone)]
pub struct PatchEmbed3d {
    pub proj: Linear,
    pub pos: Tensor,
    pub cls: Tensor,
    grid: [usize; 3],
}

impl PatchEmbed3d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patch_len: usize,
        grid: [usize; 3],
        d_v: usize,
    ) -> Result<Self> {
        let n: usize = grid.iter().product();
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), patch_len, d_v, true)?,
            pos: store.get_or_init(&format!("{name}.pos"), &[n, d_v], Init::SinCos3d { grid })?,
            cls: store.get_or_init(&format!("{name}.cls"), &[d_v], Init::Normal { std: 0.02 })?,
            grid,
        })
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn patch_len(&self) -> usize {
        self.proj.in_features()
    }

    pub fn dim(&self) -> usize {
        self.proj.out_features()
    }

    /// `patches: (B, N_p, patch_len)`.
    pub fn embed(&self, patches: &Tensor) -> Result<VisionTokens> {
        let (b, n, len) = patches.dims3()?;
        let expected: usize = self.grid.iter().product();
        if len != self.patch_len() || n != expected {
            return Err(Error::Config(format!(
                "patch embedding expects ({expected}, {}) patches, got ({n}, {len})",
                self.patch_len()
            )));
        }
        let tokens = self.proj.forward(patches)?.broadcast_add(&self.pos)?;
        let cls = self.cls.unsqueeze(0)?.broadcast_as((b, self.dim()))?.contiguous()?;
        Ok(VisionTokens {
            tokens,
            cls,
            grid_dims: self.grid,
        })
    }
}

/// Global 3D ViT: patch embedding followed by a pre-norm transformer stack
/// over `[CLS, patches]` and a final layer norm.
#[derive(Debug, Clone)]
pub struct Vit3d {
    pub embed: PatchEmbed3d,
    pub stack: TransformerStack,
    pub norm: LayerNorm,
}

impl Vit3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patch_len: usize,
        grid: [usize; 3],
        d_v: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            embed: PatchEmbed3d::new(store, &format!("{name}.embed"), patch_len, grid, d_v)?,
            stack: TransformerStack::new(store, &format!("{name}.blocks"), depth, d_v, heads)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_v)?,
        })
    }

    pub fn encode_embedded(&self, embedded: &VisionTokens) -> Result<VisionTokens> {
        let x = self.norm.forward(&self.stack.forward(&embedded.with_cls()?, None)?)?;
        VisionTokens::from_with_cls(&x, embedded.grid_dims)
    }

    pub fn encode(&self, patches: &Tensor) -> Result<VisionTokens> {
        self.encode_embedded(&self.embed.embed(patches)?)
    }
}
