use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax across dim 1 at every (sample, spatial position).
    SoftmaxChannel,
}

pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    // split by sign to avoid exp overflow
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Element>(input: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    match kind {
        Activation::Relu => Ok(input.map(|v| if v > T::zero() { v } else { T::zero() })),
        Activation::Sigmoid => Ok(input.map(sigmoid_scalar)),
        Activation::SoftmaxChannel => softmax_channel(input),
    }
}

fn softmax_channel<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() < 2 {
        return Err(Error::shape(format!("softmax needs a channel dim, got {:?}", input.shape())));
    }
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let plane: usize = input.shape()[2..].iter().product();
    let x = input.data();
    let mut out = input.zeros_like();
    let y = out.data_mut();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(x[base + ch * plane + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - m).exp();
                y[base + ch * plane + p] = e;
                s = s + e;
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                y[i] = y[i] / s;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product given the forward input and output.
pub(crate) fn activation_backward<T: Element>(
    kind: Activation,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    match kind {
        Activation::Relu => input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => output.zip_map(grad_out, |y, g| g * y * (T::one() - y)),
        Activation::SoftmaxChannel => {
            let (n, c) = (output.shape()[0], output.shape()[1]);
            let plane: usize = output.shape()[2..].iter().product();
            let y = output.data();
            let g = grad_out.data();
            let mut dx = output.zeros_like();
            for b in 0..n {
                let base = b * c * plane;
                for p in 0..plane {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        dot = dot + y[i] * g[i];
                    }
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        dx.data_mut()[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            Ok(dx)
        }
    }
}
