use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};

/// Trainable factorized update `(α/r)·A·B` added to a frozen linear map.
/// `A: (d_in, r)` starts at zero so the adapted map equals the base map.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankAdapter {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config(format!("{name}: adapter rank must be >= 1")));
        }
        Ok(Self {
            a: store.get_or_init(&format!("{name}.lora_a"), &[d_in, rank], Init::Zeros)?,
            b: store.get_or_init(
                &format!("{name}.lora_b"),
                &[rank, d_out],
                Init::Normal { std: 1.0 / (rank as f64).sqrt() },
            )?,
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_scalars(&self) -> usize {
        self.a.elem_count() + self.b.elem_count()
    }

    /// `x·A·B·(α/r)` for `x: (..., d_in)`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x.broadcast_matmul(&self.a)?.broadcast_matmul(&self.b)? * self.scale())?)
    }

    /// Dense `(d_out, d_in)` update in the orientation of `Linear::weight`.
    pub fn dense_update(&self) -> Result<Tensor> {
        Ok((self.a.matmul(&self.b)?.t()? * self.scale())?)
    }
}

/// Attaches adapters to every linear map whose role name (for example
/// `attn.q`) is in `targets`. Returns the names of the adapter parameters.
/// Rank 0 leaves the model untouched.
pub(crate) fn attach<'a>(
    store: &mut ParamStore,
    linears: impl IntoIterator<Item = (String, &'a mut Linear)>,
    targets: &[String],
    rank: usize,
    alpha: f64,
) -> Result<Vec<String>> {
    let mut created = Vec::new();
    if rank == 0 {
        return Ok(created);
    }
    for (role, linear) in linears {
        if !targets.iter().any(|t| t == &role) {
            continue;
        }
        let name = linear.name().to_string();
        let adapter = LowRankAdapter::new(store, &name, linear.in_features(), linear.out_features(), rank, alpha)?;
        created.push(format!("{name}.lora_a"));
        created.push(format!("{name}.lora_b"));
        linear.set_adapter(Some(adapter));
    }
    Ok(created)
}
