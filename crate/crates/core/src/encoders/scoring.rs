use candle_core::Tensor;

use super::{PatchScores, SliceFeatures, VisionTokens};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;

/// Slice-guided patch scoring. Low-level patch tokens query the slice
/// features through one pre-norm residual cross-attention + FFN block; a
/// two-layer MLP with a sigmoid maps each scoring feature to a score in
/// `(0, 1)`.
#[derive(Debug, Clone)]
pub struct PatchScorer {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

impl PatchScorer {
    pub fn new(store: &mut ParamStore, name: &str, d_v: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d_v)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), d_v)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_v, heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d_v)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_v, 4 * d_v)?,
            mlp_hidden: Linear::new(store, &format!("{name}.mlp.0"), d_v, d_v, true)?,
            mlp_out: Linear::new(store, &format!("{name}.mlp.1"), d_v, 1, true)?,
        })
    }

    /// Cross-attention stage alone: `(attention output, weights)` with
    /// weights shaped `(B, heads, N_p, N_s)`.
    pub fn attention(&self, low: &VisionTokens, slices: &SliceFeatures) -> Result<(Tensor, Tensor)> {
        let dq = low.dim()?;
        let dk = slices.features.dims3()?.2;
        if dq != dk {
            return Err(Error::Config(format!(
                "patch tokens have width {dq} but slice features have width {dk}"
            )));
        }
        let q = self.ln_q.forward(&low.tokens)?;
        let kv = self.ln_kv.forward(&slices.features)?;
        self.attn.forward_with_weights(&q, &kv, None)
    }

    /// Scoring features `S_3d`, shape `(B, N_p, d_v)`.
    pub fn scoring_features(&self, low: &VisionTokens, slices: &SliceFeatures) -> Result<Tensor> {
        let (attn, _) = self.attention(low, slices)?;
        let s = (&low.tokens + attn)?;
        Ok((&s + self.ffn.forward(&self.ln_ffn.forward(&s)?)?)?)
    }

    pub fn score(&self, low: &VisionTokens, slices: &SliceFeatures) -> Result<PatchScores> {
        let s = self.scoring_features(low, slices)?;
        let logits = self.mlp_out.forward(&self.mlp_hidden.forward(&s)?.gelu_erf()?)?;
        Ok(PatchScores {
            scores: sigmoid(&logits.squeeze(2)?)?,
        })
    }
}
