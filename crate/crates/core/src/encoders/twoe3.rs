use candle_core::Tensor;

use super::{PatchEmbed3d, PatchScorer, PatchScores, SliceEncoder, VisionTokens};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, TransformerStack};
use crate::params::ParamStore;

/// 2D-enhanced 3D encoder. Low-level patch embeddings are gated by
/// slice-guided scores before the transformer stack; CLS is not gated.
#[derive(Debug, Clone)]
pub struct Encoder2e3 {
    pub slices: SliceEncoder,
    pub embed: PatchEmbed3d,
    pub scorer: PatchScorer,
    pub stack: TransformerStack,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Encoded2e3 {
    pub tokens: VisionTokens,
    pub scores: PatchScores,
}

impl Encoder2e3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &crate::config::Config,
    ) -> Result<Self> {
        let slice_tokens = (cfg.slice_size[0] / cfg.slice_patch) * (cfg.slice_size[1] / cfg.slice_patch);
        let slice_patch_len = cfg.slice_patch * cfg.slice_patch * cfg.channels;
        Ok(Self {
            slices: SliceEncoder::new(
                store,
                &format!("{name}.slices"),
                slice_tokens,
                slice_patch_len,
                cfg.d_v,
                cfg.slice_depth,
                cfg.heads,
            )?,
            embed: PatchEmbed3d::new(store, &format!("{name}.embed"), cfg.patch_len(), cfg.grid, cfg.d_v)?,
            scorer: PatchScorer::new(store, &format!("{name}.scorer"), cfg.d_v, cfg.heads)?,
            stack: TransformerStack::new(store, &format!("{name}.blocks"), cfg.vit_depth, cfg.d_v, cfg.heads)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_v)?,
        })
    }

    /// Weights each patch row by its score and runs the stack.
    pub fn encode_with_scores(&self, low: &VisionTokens, scores: &Tensor) -> Result<VisionTokens> {
        let (b, n, _) = low.tokens.dims3()?;
        if scores.dims() != [b, n] {
            return Err(Error::Shape(format!(
                "scores {:?} do not match patch tokens ({b}, {n})",
                scores.dims()
            )));
        }
        let weighted = VisionTokens {
            tokens: low.tokens.broadcast_mul(&scores.unsqueeze(2)?)?,
            cls: low.cls.clone(),
            grid_dims: low.grid_dims,
        };
        let x = self.norm.forward(&self.stack.forward(&weighted.with_cls()?, None)?)?;
        VisionTokens::from_with_cls(&x, low.grid_dims)
    }

    /// `patches: (B, N_p, patch_len)`, `slices: (B, N_s, tokens, patch_len_2d)`.
    pub fn encode(&self, patches: &Tensor, slices: &Tensor) -> Result<Encoded2e3> {
        let low = self.embed.embed(patches)?;
        let slice_features = self.slices.encode(slices)?;
        let scores = self.scorer.score(&low, &slice_features)?;
        let tokens = self.encode_with_scores(&low, &scores.scores)?;
        Ok(Encoded2e3 { tokens, scores })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::encoders::Vit3d;
    use candle_core::{DType, Device};

    fn tiny() -> Config {
        let mut c = Config::desk();
        c.volume_dims = [2, 4, 4];
        c.grid = [2, 2, 2];
        c.strides = [1, 1, 1];
        c.d_v = 8;
        c.heads = 2;
        c.slice_size = [4, 4];
        c.slice_patch = 2;
        c.n_slices = 3;
        c
    }

    fn inputs(c: &Config) -> (Tensor, Tensor) {
        let n = c.num_patches() * c.patch_len();
        let p: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 / 7.0).collect();
        let s: Vec<f64> = (0..3 * 4 * 4).map(|i| ((i * 5) % 9) as f64 / 9.0).collect();
        (
            Tensor::from_vec(p, (1, c.num_patches(), c.patch_len()), &Device::Cpu).unwrap(),
            Tensor::from_vec(s, (1, 3, 4, 4), &Device::Cpu).unwrap(),
        )
    }

    #[test]
    fn unit_scores_reduce_to_plain_vit() {
        let c = tiny();
        // same names => same parameters for embed and blocks
        let mut s = ParamStore::new(3, DType::F64);
        let e = Encoder2e3::new(&mut s, "enc", &c).unwrap();
        let vit = Vit3d::new(&mut s, "enc", c.patch_len(), c.grid, c.d_v, c.vit_depth, c.heads).unwrap();
        let (p, _) = inputs(&c);
        let low = e.embed.embed(&p).unwrap();
        let ones = Tensor::ones((1, 8), DType::F64, &Device::Cpu).unwrap();
        let a = e.encode_with_scores(&low, &ones).unwrap();
        let b = vit.encode(&p).unwrap();
        let diff = (a.tokens - b.tokens).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn zero_scores_annihilate_patch_inputs() {
        let c = tiny();
        let mut s = ParamStore::new(3, DType::F64);
        let e = Encoder2e3::new(&mut s, "enc", &c).unwrap();
        let (p, _) = inputs(&c);
        let low = e.embed.embed(&p).unwrap();
        let zeros = Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap();
        let weighted = low.tokens.broadcast_mul(&zeros.unsqueeze(2).unwrap()).unwrap();
        assert_eq!(weighted.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        // with zeroed patch inputs, the output no longer depends on the volume
        let p2 = (&p * 3.0).unwrap();
        let low2 = e.embed.embed(&p2).unwrap();
        let a = e.encode_with_scores(&low, &zeros).unwrap();
        let b = e.encode_with_scores(&low2, &zeros).unwrap();
        assert_eq!(
            a.tokens.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.tokens.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn weighting_is_row_local() {
        let c = tiny();
        let mut s = ParamStore::new(3, DType::F64);
        let e = Encoder2e3::new(&mut s, "enc", &c).unwrap();
        let (p, _) = inputs(&c);
        let low = e.embed.embed(&p).unwrap();
        let base: Vec<f64> = vec![0.5; 8];
        let mut bumped = base.clone();
        bumped[3] = 0.9;
        let w = |v: Vec<f64>| {
            let t = Tensor::from_vec(v, (1, 8, 1), &Device::Cpu).unwrap();
            low.tokens.broadcast_mul(&t).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap()
        };
        let (a, b) = (w(base), w(bumped));
        for i in 0..8 {
            assert_eq!(a[i] == b[i], i != 3);
        }
    }

    #[test]
    fn full_encode_shapes() {
        let c = tiny();
        let mut s = ParamStore::new(3, DType::F64);
        let e = Encoder2e3::new(&mut s, "enc", &c).unwrap();
        let (p, sl) = inputs(&c);
        let out = e.encode(&p, &sl).unwrap();
        assert_eq!(out.tokens.tokens.dims(), &[1, 8, 8]);
        assert_eq!(out.scores.scores.dims(), &[1, 8]);
    }
}
