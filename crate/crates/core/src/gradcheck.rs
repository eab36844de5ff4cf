//! Central finite differences, used to check analytic gradients.

use candle_core::{DType, Tensor};

use crate::error::Result;

/// Numerical gradient of `f` at `x` by central differences with step `eps`.
/// `x` must be float64.
pub fn numeric_grad(x: &Tensor, eps: f64, f: impl Fn(&Tensor) -> Result<f64>) -> Result<Vec<f64>> {
    let shape = x.shape().clone();
    let base = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = f(&Tensor::from_vec(probe.clone(), shape.clone(), x.device())?)?;
        probe[i] = base[i] - eps;
        let down = f(&Tensor::from_vec(probe.clone(), shape.clone(), x.device())?)?;
        probe[i] = base[i];
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
