//! Nearest and linear resampling over the spatial dims.
//!
//! Linear mode uses pixel-center alignment (the "align corners = false"
//! convention): output index `i` samples the input at
//! `(i + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    Linear,
}

/// Two-tap interpolation stencil for one output index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Linear-interpolation taps mapping `input_len` samples to `output_len`.
pub fn linear_taps(input_len: usize, output_len: usize) -> Vec<Tap> {
    let scale = input_len as f64 / output_len as f64;
    let max = (input_len - 1) as f64;
    (0..output_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input_len - 1);
            let w_hi = src - lo as f64;
            Tap { lo, hi, w_lo: 1.0 - w_hi, w_hi }
        })
        .collect()
}

/// Nearest-neighbour source index for each output index.
pub fn nearest_taps(input_len: usize, output_len: usize) -> Vec<usize> {
    (0..output_len).map(|i| (i * input_len / output_len).min(input_len - 1)).collect()
}

/// `[outer, len, inner]` view of `shape` around `axis`.
fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn resize_axis<T: Element>(x: &Tensor<T>, axis: usize, out_len: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_view(x.shape(), axis);
    if len == out_len {
        return Ok(x.clone());
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = out_len;
    let mut out = Tensor::zeros(&shape)?;
    let src = x.data();
    let dst = out.data_mut();
    match mode {
        UpsampleMode::Nearest => {
            let taps = nearest_taps(len, out_len);
            for o in 0..outer {
                for (i, &s) in taps.iter().enumerate() {
                    let d0 = (o * out_len + i) * inner;
                    let s0 = (o * len + s) * inner;
                    dst[d0..d0 + inner].copy_from_slice(&src[s0..s0 + inner]);
                }
            }
        }
        UpsampleMode::Linear => {
            let taps = linear_taps(len, out_len);
            for o in 0..outer {
                for (i, t) in taps.iter().enumerate() {
                    let (wl, wh) = (T::from_f64(t.w_lo), T::from_f64(t.w_hi));
                    let d0 = (o * out_len + i) * inner;
                    let (l0, h0) = ((o * len + t.lo) * inner, (o * len + t.hi) * inner);
                    for k in 0..inner {
                        dst[d0 + k] = wl * src[l0 + k] + wh * src[h0 + k];
                    }
                }
            }
        }
    }
    Ok(out)
}

fn resize_axis_backward<T: Element>(
    g: &Tensor<T>,
    axis: usize,
    in_len: usize,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    let (outer, out_len, inner) = axis_view(g.shape(), axis);
    if in_len == out_len {
        return Ok(g.clone());
    }
    let mut shape = g.shape().to_vec();
    shape[axis] = in_len;
    let mut dx = Tensor::zeros(&shape)?;
    let src = g.data();
    let dst = dx.data_mut();
    match mode {
        UpsampleMode::Nearest => {
            let taps = nearest_taps(in_len, out_len);
            for o in 0..outer {
                for (i, &s) in taps.iter().enumerate() {
                    let g0 = (o * out_len + i) * inner;
                    let d0 = (o * in_len + s) * inner;
                    for k in 0..inner {
                        dst[d0 + k] = dst[d0 + k] + src[g0 + k];
                    }
                }
            }
        }
        UpsampleMode::Linear => {
            let taps = linear_taps(in_len, out_len);
            for o in 0..outer {
                for (i, t) in taps.iter().enumerate() {
                    let (wl, wh) = (T::from_f64(t.w_lo), T::from_f64(t.w_hi));
                    let g0 = (o * out_len + i) * inner;
                    let (l0, h0) = ((o * in_len + t.lo) * inner, (o * in_len + t.hi) * inner);
                    for k in 0..inner {
                        dst[l0 + k] = dst[l0 + k] + wl * src[g0 + k];
                        dst[h0 + k] = dst[h0 + k] + wh * src[g0 + k];
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Resizes the spatial dims of `[N, C, s..]` to `target` extents.
pub fn resize_nd<T: Element>(input: &Tensor<T>, target: &[usize], mode: UpsampleMode) -> Result<Tensor<T>> {
    let sdims = input.spatial().len();
    if sdims == 0 || target.len() != sdims {
        return Err(Error::shape(format!(
            "resize target {target:?} does not match spatial dims of {:?}",
            input.shape()
        )));
    }
    if target.contains(&0) {
        return Err(Error::invalid("resize target extents must be at least 1"));
    }
    let mut x = input.clone();
    for (d, &t) in target.iter().enumerate() {
        x = resize_axis(&x, 2 + d, t, mode)?;
    }
    Ok(x)
}

pub(crate) fn resize_nd_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    let mut g = grad_out.clone();
    for axis in (2..input_shape.len()).rev() {
        g = resize_axis_backward(&g, axis, input_shape[axis], mode)?;
    }
    Ok(g)
}

/// Integer-factor upsampling of the spatial dims.
pub fn upsample_nd<T: Element>(input: &Tensor<T>, factor: &[usize], mode: UpsampleMode) -> Result<Tensor<T>> {
    if factor.len() != input.spatial().len() {
        return Err(Error::shape(format!(
            "factor {factor:?} does not match spatial dims of {:?}",
            input.shape()
        )));
    }
    if factor.contains(&0) {
        return Err(Error::invalid("upsample factors must be at least 1"));
    }
    let target: Vec<usize> = input.spatial().iter().zip(factor).map(|(&s, &f)| s * f).collect();
    resize_nd(input, &target, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| i as f64).unwrap();
        assert_eq!(upsample_nd(&x, &[1, 1], UpsampleMode::Linear).unwrap(), x);
        assert_eq!(upsample_nd(&x, &[1, 1], UpsampleMode::Nearest).unwrap(), x);
    }

    #[test]
    fn nearest_replicates_blocks() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nd(&x, &[2, 2], UpsampleMode::Nearest).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn taps_sum_to_one() {
        for (i, o) in [(2, 4), (5, 3), (7, 16), (300, 256)] {
            for t in linear_taps(i, o) {
                assert!((t.w_lo + t.w_hi - 1.0).abs() < 1e-12);
                assert!(t.lo < i && t.hi < i);
            }
        }
    }
}
