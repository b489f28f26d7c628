use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, log_softmax_last_dim, LayerNorm, Linear, TransformerStack};
use crate::params::{Init, ParamStore};
use crate::tokenizer::{TokenIds, EOS};

/// Tiny causal transformer language model with learned positions and an
/// untied output head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub token_embedding: Tensor,
    pub pos: Tensor,
    pub marker_g: Tensor,
    pub marker_l: Tensor,
    pub stack: TransformerStack,
    pub ln_f: LayerNorm,
    pub lm_head: Linear,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        d_t: usize,
        layers: usize,
        heads: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(Self {
            token_embedding: store.get_or_init(
                &format!("{name}.tokens"),
                &[vocab_size, d_t],
                Init::Normal { std: 0.5 },
            )?,
            pos: store.get_or_init(&format!("{name}.pos"), &[max_len, d_t], Init::Normal { std: 0.02 })?,
            marker_g: store.get_or_init(&format!("{name}.marker_g"), &[d_t], Init::Normal { std: 0.5 })?,
            marker_l: store.get_or_init(&format!("{name}.marker_l"), &[d_t], Init::Normal { std: 0.5 })?,
            stack: TransformerStack::new(store, &format!("{name}.blocks"), layers, d_t, heads)?,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d_t)?,
            lm_head: Linear::new(store, &format!("{name}.lm_head"), d_t, vocab_size, true)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.token_embedding.dims()[1]
    }

    pub fn max_len(&self) -> usize {
        self.pos.dims()[0]
    }

    /// `(B, L, d_t)` embeddings of equal-length id rows.
    pub fn embed_ids(&self, rows: &[TokenIds]) -> Result<Tensor> {
        let b = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::Shape("ragged id rows".into()));
        }
        let vocab = self.vocab_size() as u32;
        if let Some(bad) = rows.iter().flatten().find(|&&id| id >= vocab) {
            return Err(Error::Tokenization(format!("token id {bad} outside vocabulary of size {vocab}")));
        }
        let flat: Vec<u32> = rows.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, b * l, &Device::Cpu)?;
        Ok(self.token_embedding.index_select(&ids, 0)?.reshape((b, l, self.width()))?)
    }

    /// Causal forward over input embeddings `(B, T, d_t)`; returns logits
    /// `(B, T, |V|)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, d) = x.dims3()?;
        if d != self.width() {
            return Err(Error::Config(format!("decoder width {} but input width {d}", self.width())));
        }
        if t > self.max_len() {
            return Err(Error::Input(format!(
                "sequence of {t} positions exceeds decoder context {}",
                self.max_len()
            )));
        }
        let h = x.broadcast_add(&self.pos.narrow(0, 0, t)?)?;
        let h = self.stack.forward(&h, Some(&causal_mask(t, x.dtype())?))?;
        self.lm_head.forward(&self.ln_f.forward(&h)?)
    }

    /// Linear maps eligible for adapters, keyed by role (`attn.q`, ...).
    pub(crate) fn linears_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out = Vec::new();
        for block in &mut self.stack.blocks {
            for (role, lin) in block.attn.linears_mut() {
                out.push((role.to_string(), lin));
            }
            out.push(("ffn.fc1".to_string(), &mut block.ffn.fc1));
            out.push(("ffn.fc2".to_string(), &mut block.ffn.fc2));
        }
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }
}

/// Roles accepted by [`crate::decoder::apply_low_rank_adapters`].
pub const ADAPTER_ROLES: [&str; 7] = ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2", "lm_head"];

/// Mean negative log-likelihood over positions where `mask` is set.
/// `logits: (B, T, |V|)` already aligned with `targets: B × T`.
pub fn generation_loss(logits: &Tensor, targets: &[TokenIds], mask: &[Vec<bool>]) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    if targets.len() != b
        || mask.len() != b
        || targets.iter().any(|r| r.len() != t)
        || mask.iter().any(|m| m.len() != t)
    {
        return Err(Error::Shape(format!("targets/mask do not match logits ({b}, {t}, {v})")));
    }
    let count = mask.iter().flatten().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Input("empty answer region".into()));
    }
    let mut weights = vec![0.0f64; b * t * v];
    for (i, (row, m)) in targets.iter().zip(mask).enumerate() {
        for (j, (&id, &on)) in row.iter().zip(m).enumerate() {
            if on {
                let id = id as usize;
                if id >= v {
                    return Err(Error::Tokenization(format!("target id {id} outside vocabulary of size {v}")));
                }
                weights[(i * t + j) * v + id] = 1.0;
            }
        }
    }
    let w = Tensor::from_vec(weights, (b, t, v), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let picked = (log_softmax_last_dim(logits)? * w)?.sum_all()?;
    Ok((picked * (-1.0 / count as f64))?)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding after `prefix: (1, T, d_t)`, which must already end with
/// the `<bos>` embedding. Stops at `<eos>`, `max_len` tokens, or the end of
/// the decoder context.
pub fn generate_greedy(decoder: &Decoder, prefix: &Tensor, max_len: usize) -> Result<TokenIds> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be >= 1".into()));
    }
    let mut x = prefix.clone();
    let mut out = Vec::new();
    while out.len() < max_len && x.dims3()?.1 <= decoder.max_len() {
        let logits = decoder.forward(&x)?;
        let t = logits.dims3()?.1;
        let last: Vec<f64> = logits
            .narrow(1, t - 1, 1)?
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1()?;
        let next = argmax_lowest(&last) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
        if x.dims3()?.1 == decoder.max_len() {
            break;
        }
        let e = decoder.embed_ids(&[vec![next]])?;
        x = Tensor::cat(&[&x, &e], 1)?;
    }
    Ok(out)
}

#[cfg(test)]
fn max_abs(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?.flatten_all()?.max(0)?.to_dtype(candle_core::DType::F64)?.to_scalar()?)
}
