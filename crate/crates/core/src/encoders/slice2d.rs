use candle_core::Tensor;

use super::SliceFeatures;
use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerStack};
use crate::params::{Init, ParamStore};

/// Small trainable 2D ViT applied independently to every axial slice; each
/// slice is summarized by its CLS output.
#[derive(Debug, Clone)]
pub struct SliceEncoder {
    pub proj: Linear,
    pub pos: Tensor,
    pub cls: Tensor,
    pub stack: TransformerStack,
    tokens_per_slice: usize,
}

impl SliceEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tokens_per_slice: usize,
        patch_len: usize,
        d_v: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), patch_len, d_v, true)?,
            pos: store.get_or_init(
                &format!("{name}.pos"),
                &[tokens_per_slice, d_v],
                Init::Normal { std: 0.02 },
            )?,
            cls: store.get_or_init(&format!("{name}.cls"), &[d_v], Init::Normal { std: 0.02 })?,
            stack: TransformerStack::new(store, &format!("{name}.blocks"), depth, d_v, heads)?,
            tokens_per_slice,
        })
    }

    /// `slices: (B, N_s, tokens_per_slice, patch_len)` → `(B, N_s, d_v)`.
    pub fn encode(&self, slices: &Tensor) -> Result<SliceFeatures> {
        let (b, n_s, n_tok, len) = slices.dims4()?;
        if n_s == 0 {
            return Err(Error::Input("empty slice stack".into()));
        }
        if n_tok != self.tokens_per_slice || len != self.proj.in_features() {
            return Err(Error::Config(format!(
                "slice encoder expects ({}, {}) patches per slice, got ({n_tok}, {len})",
                self.tokens_per_slice,
                self.proj.in_features()
            )));
        }
        let d = self.proj.out_features();
        let flat = slices.reshape((b * n_s, n_tok, len))?;
        let tokens = self.proj.forward(&flat)?.broadcast_add(&self.pos)?;
        let cls = self.cls.reshape((1, 1, d))?.broadcast_as((b * n_s, 1, d))?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?;
        let x = self.stack.forward(&x, None)?;
        let features = x.narrow(1, 0, 1)?.reshape((b, n_s, d))?;
        Ok(SliceFeatures { features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn one_row_per_slice_and_duplicates_match() {
        let mut s = ParamStore::new(2, DType::F64);
        let enc = SliceEncoder::new(&mut s, "s", 4, 3, 8, 1, 2).unwrap();
        let one: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let other: Vec<f64> = (0..12).map(|i| (11 - i) as f64 / 12.0).collect();
        let data: Vec<f64> = [one.clone(), other, one].concat();
        let x = Tensor::from_vec(data, (1, 3, 4, 3), &Device::Cpu).unwrap();
        let f = enc.encode(&x).unwrap().features;
        assert_eq!(f.dims(), &[1, 3, 8]);
        let rows = f.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], rows[2]);
        assert_ne!(rows[0], rows[1]);

        let single = Tensor::from_vec(vec![0.5f64; 12], (1, 1, 4, 3), &Device::Cpu).unwrap();
        assert_eq!(enc.encode(&single).unwrap().features.dims(), &[1, 1, 8]);
        let empty = Tensor::zeros((1, 0, 4, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&empty), Err(Error::Input(_))));
    }
}
