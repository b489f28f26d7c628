//! Contrastive alignment objectives.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last_dim;

/// Maximum tolerated deviation of an input row norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Cosine similarities of a batch and the temperature that scales them.
#[derive(Debug, Clone)]
pub struct SimilarityBatch {
    /// `(B, B)`; entry `(i, k)` compares vision row `i` with text row `k`.
    pub matrix: Tensor,
    /// Scalar tensor `τ > 0`.
    pub temperature: Tensor,
}

impl SimilarityBatch {
    pub fn new(matrix: Tensor, temperature: Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        if r != c {
            return Err(Error::Input(format!("similarity matrix must be square, got {r}x{c}")));
        }
        let tau = temperature.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Self { matrix, temperature })
    }

    pub fn batch_size(&self) -> usize {
        self.matrix.dims()[0]
    }

    /// Paired (diagonal) similarities `(B,)`.
    pub fn diagonal(&self) -> Result<Tensor> {
        diagonal(&self.matrix)
    }
}

pub(crate) fn diagonal(m: &Tensor) -> Result<Tensor> {
    let n = m.dims2()?.0;
    let eye = Tensor::eye(n, m.dtype(), m.device())?;
    Ok((m * eye)?.sum(D::Minus1)?)
}

fn check_unit_rows(x: &Tensor, what: &str) -> Result<()> {
    let norms = x
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .sqrt()?
        .to_vec1::<f64>()?;
    if let Some((i, n)) = norms
        .iter()
        .enumerate()
        .find(|(_, n)| (*n - 1.0).abs() > UNIT_NORM_TOLERANCE)
    {
        return Err(Error::Input(format!("{what} row {i} has norm {n}, expected unit norm")));
    }
    Ok(())
}

/// `a_i · b_k` for unit-norm rows `a: (B, d)`, `b: (B', d)`.
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_unit_rows(a, "left")?;
    check_unit_rows(b, "right")?;
    Ok(a.matmul(&b.t()?)?)
}

/// Symmetric InfoNCE with per-batch normalization:
/// `-(1/2B) Σ_i [log softmax_row_i(i) + log softmax_col_i(i)]` over
/// logits `sims / τ`.
pub fn info_nce_symmetric(sims: &SimilarityBatch) -> Result<Tensor> {
    let b = sims.batch_size();
    let logits = sims.matrix.broadcast_div(&sims.temperature)?;
    let rows = diagonal(&log_softmax_last_dim(&logits)?)?.sum_all()?;
    let cols = diagonal(&log_softmax_last_dim(&logits.t()?.contiguous()?)?)?.sum_all()?;
    Ok(((rows + cols)? * (-1.0 / (2.0 * b as f64)))?)
}

/// `Σ_i (s1_i/τ − s2_i/τ)²` over paired similarities.
pub fn semantic_consistency_loss(stage1: &Tensor, stage2: &Tensor, tau: f64) -> Result<Tensor> {
    if stage1.dims() != stage2.dims() || stage1.rank() != 1 {
        return Err(Error::Input(format!(
            "paired similarity vectors differ: {:?} vs {:?}",
            stage1.dims(),
            stage2.dims()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(((stage1 - stage2)? / tau)?.sqr()?.sum_all()?)
}

/// `L_CL^{2e3} + λ_s · L_SA`.
pub fn stage2_loss(cl_2e3: &Tensor, sa: &Tensor, lambda_s: f64) -> Result<Tensor> {
    if !(lambda_s >= 0.0) {
        return Err(Error::Parameter(format!("lambda_s must be >= 0, got {lambda_s}")));
    }
    Ok((cl_2e3 + (sa * lambda_s)?)?)
}

/// Scalar temperature tensor in the given dtype.
pub fn temperature(tau: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(tau, &Device::Cpu)?.to_dtype(dtype)?)
}
