//! Central finite-difference gradient checks for double-precision models.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-5)`. The floor sits
    /// above the roundoff of a central difference, so exactly-zero gradients
    /// do not read as failures.
    pub fn relative_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n).collect();
        norm(&diff) / norm(&self.analytic).max(norm(&self.numeric)).max(1e-5)
    }
}

/// Compares backprop gradients of `loss` against central differences with
/// step `h` for every element of every variable in `vars`.
pub fn check_gradients<F>(vars: &[(String, Var)], h: f64, loss: F) -> Result<Vec<GradCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    if vars.iter().any(|(_, v)| v.dtype() != DType::F64) {
        return Err(Error::Input("gradient checks require f64 parameters".into()));
    }
    let value = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let grads = loss()?.backward()?;
    let mut out = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let mut numeric = Vec::with_capacity(base.len());
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + h;
            var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), var.device())?)?;
            let plus = value(&loss()?)?;
            probe[i] = base[i] - h;
            var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), var.device())?)?;
            let minus = value(&loss()?)?;
            probe[i] = base[i];
            numeric.push((plus - minus) / (2.0 * h));
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), var.device())?)?;
        out.push(GradCheck {
            name: name.clone(),
            analytic,
            numeric,
        });
    }
    Ok(out)
}

/// Largest relative error across `checks`, with the offending name.
pub fn worst(checks: &[GradCheck]) -> Option<(String, f64)> {
    checks
        .iter()
        .map(|c| (c.name.clone(), c.relative_error()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Var::from_vec(vec![0.5f64, -1.5, 2.0], 3, &Device::Cpu).unwrap();
        let t = x.as_tensor().clone();
        let checks = check_gradients(&[("x".into(), x)], 1e-5, || Ok((t.sqr()?.sum_all()? * 3.0)?)).unwrap();
        assert!(checks[0].relative_error() < 1e-8);
        assert!((checks[0].analytic[1] + 9.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_f32() {
        let x = Var::from_vec(vec![0.5f32], 1, &Device::Cpu).unwrap();
        let t = x.as_tensor().clone();
        assert!(check_gradients(&[("x".into(), x)], 1e-3, || Ok(t.sum_all()?)).is_err());
    }
}
