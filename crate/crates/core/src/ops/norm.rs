//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Saved state of a train-mode forward pass.
pub(crate) struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    /// Normalized input before the affine map.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("batch norm needs [N, C, ..], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_affine<T: Element>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "gamma {:?} / beta {:?} must both be [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

pub(crate) fn batch_norm_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormTrain<T>> {
    let (n, c, plane) = layout(input.shape())?;
    check_affine(c, gamma, beta)?;
    let count = n * plane;
    if count < 2 {
        return Err(Error::invalid(format!(
            "train-mode batch norm needs at least 2 values per channel, input {:?} has {count}",
            input.shape()
        )));
    }
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let inv_count = 1.0 / count as f64;
    for ch in 0..c {
        // accumulate in f64 so the statistic does not depend on summation order drift in f32
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s * inv_count;
        let mut ss = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            ss += x[off..off + plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        let v = ss * inv_count;
        mean[ch] = T::from_f64(m);
        var[ch] = T::from_f64(v);
        inv_std[ch] = T::from_f64(1.0 / (v + eps).sqrt());
    }
    let mut xhat = input.zeros_like();
    let mut out = input.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let h = (x[i] - m) * is;
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = g * h + be;
            }
        }
    }
    Ok(BatchNormTrain { output: out, xhat, inv_std, mean, var })
}

pub(crate) struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub(crate) fn batch_norm_train_backward<T: Element>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let (n, c, plane) = layout(xhat.shape())?;
    let count = T::from_f64((n * plane) as f64);
    let g = grad_out.data();
    let h = xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] = dbeta[ch] + g[i];
                dgamma[ch] = dgamma[ch] + g[i] * h[i];
            }
        }
    }
    let mut dx = xhat.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma.data()[ch] * inv_std[ch] / count;
            for i in off..off + plane {
                dx.data_mut()[i] = scale * (count * g[i] - dbeta[ch] - h[i] * dgamma[ch]);
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

/// Inference-mode normalization with fixed statistics.
///
/// Returns the output and the normalized input (for the gamma gradient).
pub(crate) fn batch_norm_infer<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, plane) = layout(input.shape())?;
    check_affine(c, gamma, beta)?;
    check_affine(c, running_mean, running_var)?;
    let mut out = input.zeros_like();
    let mut xhat = input.zeros_like();
    let x = input.data();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let m = running_mean.data()[ch];
            let is = T::from_f64(1.0 / (running_var.data()[ch].as_f64() + eps).sqrt());
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let h = (x[i] - m) * is;
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = g * h + be;
            }
        }
    }
    Ok((out, xhat))
}

pub(crate) fn batch_norm_infer_backward<T: Element>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormGrads<T>> {
    let (n, c, plane) = layout(xhat.shape())?;
    let g = grad_out.data();
    let h = xhat.data();
    let mut dx = xhat.zeros_like();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let is = T::from_f64(1.0 / (running_var.data()[ch].as_f64() + eps).sqrt());
            let scale = gamma.data()[ch] * is;
            for i in off..off + plane {
                dx.data_mut()[i] = g[i] * scale;
                dgamma[ch] = dgamma[ch] + g[i] * h[i];
                dbeta[ch] = dbeta[ch] + g[i];
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
