use candle_core::{Device, Tensor};

use super::TextFeatures;
use crate::error::{Error, Result};
use crate::nn::{key_padding_mask, LayerNorm, TransformerStack};
use crate::params::{Init, ParamStore};
use crate::tokenizer::{text_encoder_ids, TokenIds, PAD};

/// Report encoder: token + position embeddings and a padding-masked
/// transformer stack with a final layer norm. Position 0 holds `<cls>`.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: Tensor,
    pub pos: Tensor,
    pub stack: TransformerStack,
    pub norm: LayerNorm,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        d_v: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            token_embedding: store.get_or_init(
                &format!("{name}.tokens"),
                &[vocab_size, d_v],
                Init::Normal { std: 0.5 },
            )?,
            pos: store.get_or_init(&format!("{name}.pos"), &[max_len, d_v], Init::Normal { std: 0.02 })?,
            stack: TransformerStack::new(store, &format!("{name}.blocks"), depth, d_v, heads)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_v)?,
            max_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.dims()[0]
    }

    /// Encodes raw report ids; `<cls>` is prepended and sequences are
    /// truncated to `max_len` then right-padded to the batch maximum.
    pub fn encode(&self, batch: &[TokenIds]) -> Result<TextFeatures> {
        if batch.is_empty() {
            return Err(Error::Input("empty text batch".into()));
        }
        let vocab = self.vocab_size() as u32;
        let seqs: Vec<TokenIds> = batch
            .iter()
            .map(|ids| {
                if let Some(bad) = ids.iter().find(|&&id| id >= vocab) {
                    return Err(Error::Tokenization(format!(
                        "token id {bad} outside vocabulary of size {vocab}"
                    )));
                }
                Ok(text_encoder_ids(ids, self.max_len))
            })
            .collect::<Result<_>>()?;
        let len = seqs.iter().map(Vec::len).max().unwrap_or(1);
        let mut flat = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len());
        for s in &seqs {
            flat.extend(s.iter().copied());
            flat.extend(std::iter::repeat(PAD).take(len - s.len()));
            mask.push((0..len).map(|i| i < s.len()).collect::<Vec<bool>>());
        }
        let b = seqs.len();
        let ids = Tensor::from_vec(flat, b * len, &Device::Cpu)?;
        let d = self.token_embedding.dims()[1];
        let x = self
            .token_embedding
            .index_select(&ids, 0)?
            .reshape((b, len, d))?
            .broadcast_add(&self.pos.narrow(0, 0, len)?)?;
        let attn_mask = key_padding_mask(&mask, self.token_embedding.dtype())?;
        let tokens = self.norm.forward(&self.stack.forward(&x, Some(&attn_mask))?)?;
        let cls = tokens.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(TextFeatures { tokens, cls, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn encoder(s: &mut ParamStore) -> TextEncoder {
        TextEncoder::new(s, "t", 20, 512, 8, 2, 2).unwrap()
    }

    #[test]
    fn empty_report_is_cls_only() {
        let mut s = ParamStore::new(1, DType::F64);
        let t = encoder(&mut s).encode(&[vec![]]).unwrap();
        assert_eq!(t.tokens.dims(), &[1, 1, 8]);
        assert_eq!(t.mask, vec![vec![true]]);
    }

    #[test]
    fn padding_does_not_reach_cls() {
        let mut s = ParamStore::new(1, DType::F64);
        let enc = encoder(&mut s);
        let short = vec![8, 9, 10];
        let a = enc.encode(&[short.clone(), vec![8; 7]]).unwrap();
        let b = enc.encode(&[short.clone(), vec![11; 9]]).unwrap();
        let alone = enc.encode(&[short]).unwrap();
        let row = |t: &TextFeatures| t.cls.narrow(0, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (ra, rb, rc) = (row(&a), row(&b), row(&alone));
        for i in 0..8 {
            assert!((ra[i] - rb[i]).abs() < 1e-6);
            assert!((ra[i] - rc[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn long_reports_are_truncated_to_max_len() {
        let mut s = ParamStore::new(1, DType::F64);
        let enc = TextEncoder::new(&mut s, "t", 20, 512, 8, 1, 2).unwrap();
        let long: Vec<u32> = (0..700).map(|i| 7 + (i % 13)).collect();
        let t = enc.encode(&[long]).unwrap();
        assert_eq!(t.tokens.dims(), &[1, 512, 8]);
    }

    #[test]
    fn out_of_vocabulary_id_is_rejected() {
        let mut s = ParamStore::new(1, DType::F64);
        assert!(matches!(encoder(&mut s).encode(&[vec![20]]), Err(Error::Tokenization(_))));
    }
}
