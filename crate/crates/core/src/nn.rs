//! Transformer building blocks on candle tensors.
//!
//! All operations are composed from primitive tensor ops so that they are
//! differentiable in both f32 and f64; gradient checks run through the exact
//! same code as training.

use candle_core::{DType, Tensor, D};

use crate::decoder::lora::LowRankAdapter;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Additive mask value for excluded attention logits. Large enough that
/// `exp` underflows to exactly zero in f32 and f64.
pub const MASK_VALUE: f64 = -1e9;

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `1 / (1 + e^{-x})` written through `tanh` for stability.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Row-wise L2 normalization over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    weight: Tensor,
    bias: Option<Tensor>,
    adapter: Option<LowRankAdapter>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.get_or_init(&format!("{name}.weight"), &[d_out, d_in], Init::Normal { std })?;
        let bias = if bias {
            Some(store.get_or_init(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            adapter: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn adapter(&self) -> Option<&LowRankAdapter> {
        self.adapter.as_ref()
    }

    pub(crate) fn set_adapter(&mut self, adapter: Option<LowRankAdapter>) {
        self.adapter = adapter;
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.broadcast_matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        if let Some(adapter) = &self.adapter {
            y = (y + adapter.delta(x)?)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get_or_init(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: store.get_or_init(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.q.out_features()
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query: (B, Nq, d)`, `kv: (B, Nk, d)`, `mask` additive and
    /// broadcastable to `(B, heads, Nq, Nk)`. Returns the output and the
    /// attention weights `(B, heads, Nq, Nk)`.
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        kv: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, nq, d) = query.dims3()?;
        let (bk, _, dk) = kv.dims3()?;
        if bk != b || dk != d {
            return Err(Error::Config(format!(
                "attention streams disagree: query {:?}, key/value {:?}",
                query.dims(),
                kv.dims()
            )));
        }
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            logits = logits.broadcast_add(m)?;
        }
        let weights = softmax_last_dim(&logits)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, d))?;
        Ok((self.o.forward(&ctx)?, weights))
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, kv, mask)?.0)
    }

    pub(crate) fn linears_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [
            ("attn.q", &mut self.q),
            ("attn.k", &mut self.k),
            ("attn.v", &mut self.v),
            ("attn.o", &mut self.o),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, name: &str, depth: usize, dim: usize, heads: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            x = block.forward(&x, mask)?;
        }
        Ok(x)
    }
}

/// `(1, 1, n, n)` additive mask hiding future positions.
pub fn causal_mask(n: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { MASK_VALUE } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, n, n), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// `(B, 1, 1, N)` additive mask from per-sequence validity flags.
pub fn key_padding_mask(valid: &[Vec<bool>], dtype: DType) -> Result<Tensor> {
    let b = valid.len();
    let n = valid.first().map_or(0, Vec::len);
    if valid.iter().any(|v| v.len() != n) {
        return Err(Error::Shape("ragged padding mask".into()));
    }
    let data: Vec<f64> = valid
        .iter()
        .flat_map(|row| row.iter().map(|&ok| if ok { 0.0 } else { MASK_VALUE }))
        .collect();
    Ok(Tensor::from_vec(data, (b, 1, 1, n), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn attention_rows_sum_to_one_and_mask_is_exact() {
        let mut store = ParamStore::new(3, DType::F64);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let mask = key_padding_mask(
            &[vec![true; 5], vec![true, true, true, false, false]],
            DType::F64,
        )
        .unwrap();
        let (_, w) = mha.forward_with_weights(&x, &x, Some(&mask)).unwrap();
        let sums = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let masked = w.narrow(0, 1, 1).unwrap().narrow(3, 3, 2).unwrap();
        assert!(masked.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_matches_definition() {
        let x = Tensor::new(&[-3.0f64, 0.0, 2.5], &Device::Cpu).unwrap();
        let s = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        for (v, x) in s.iter().zip([-3.0f64, 0.0, 2.5]) {
            assert!((v - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn width_must_split_across_heads() {
        let mut store = ParamStore::new(0, DType::F32);
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 4).is_err());
    }
}
