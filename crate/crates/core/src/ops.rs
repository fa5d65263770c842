//! Differentiable building blocks composed from primitive tensor ops so that
//! every one of them has a backward pass.

use candle_core::{DType, Device, Tensor, D};

use crate::Result;

/// Floating point type used for every parameter and activation.
pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let exp = xs.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(D::Minus1)?;
    Ok(exp.broadcast_div(&sum)?)
}

pub fn log_softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let shifted = xs.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean cross-entropy of `logits` [N, C] against integer `targets`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    if n == 0 {
        return Ok(Tensor::zeros((), DTYPE, logits.device())?);
    }
    let targets = Tensor::from_slice(targets, n, logits.device())?.unsqueeze(1)?;
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets, 1)?;
    Ok((picked.sum_all()?.neg()? / n as f64)?)
}

/// Row-wise L2 normalisation over the last dimension.
pub fn l2_normalize(xs: &Tensor) -> Result<Tensor> {
    let norm = xs.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(xs.broadcast_div(&(norm + 1e-12)?)?)
}

pub fn layer_norm(xs: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = xs.mean_keepdim(D::Minus1)?;
    let centered = xs.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}
