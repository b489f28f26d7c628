use candle_core::Tensor;

use super::LatentEmbedding;
use crate::error::Result;
use crate::nn::{l2_normalize, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadId {
    Stage1Vision,
    Stage1Text,
    Stage2Vision,
    Stage2Text,
}

impl HeadId {
    pub fn name(self) -> &'static str {
        match self {
            HeadId::Stage1Vision => "head_vision",
            HeadId::Stage1Text => "head_text",
            HeadId::Stage2Vision => "head_vision",
            HeadId::Stage2Text => "head_text",
        }
    }
}

/// Bias-free linear map `d_v → d_l` followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub id: HeadId,
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, id: HeadId, d_v: usize, d_l: usize) -> Result<Self> {
        Ok(Self {
            id,
            linear: Linear::new(store, &format!("{prefix}.{}", id.name()), d_v, d_l, false)?,
        })
    }
}

/// Projects CLS vectors `(B, d_v)` into the shared latent space.
pub fn project_to_shared(cls: &Tensor, head: &ProjectionHead) -> Result<LatentEmbedding> {
    Ok(LatentEmbedding {
        vectors: l2_normalize(&head.linear.forward(cls)?)?,
    })
}
