//! N-d cross-correlation lowered to GEMM through im2col.
//!
//! Everything is normalized to three spatial dims internally: a 2D
//! convolution is a 3D one with depth 1, kernel depth 1, stride 1, pad 0.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Normalized 3-spatial-dim geometry of one convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
    /// Output spatial extents in the caller's rank.
    pub out_spatial: Vec<usize>,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Self> {
        let rank = input_shape.len();
        if !(3..=5).contains(&rank) {
            return Err(Error::shape(format!(
                "conv input must be [N, C, spatial..] with 1-3 spatial dims, got {input_shape:?}"
            )));
        }
        let sdims = rank - 2;
        if kernel_shape.len() != rank {
            return Err(Error::shape(format!(
                "kernel rank {} does not match input rank {rank} (kernel {kernel_shape:?})",
                kernel_shape.len()
            )));
        }
        if kernel_shape[1] != input_shape[1] {
            return Err(Error::shape(format!(
                "dim 1 (channels): input has {}, kernel expects {}",
                input_shape[1], kernel_shape[1]
            )));
        }
        if stride.len() != sdims || padding.len() != sdims {
            return Err(Error::shape(format!(
                "stride {stride:?} / padding {padding:?} must have {sdims} entries"
            )));
        }
        let mut geo = ConvGeometry {
            batch: input_shape[0],
            in_channels: input_shape[1],
            out_channels: kernel_shape[0],
            input: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            padding: [0; 3],
            output: [1; 3],
            out_spatial: Vec::with_capacity(sdims),
        };
        let off = 3 - sdims;
        for d in 0..sdims {
            let (i, k, s, p) = (input_shape[2 + d], kernel_shape[2 + d], stride[d], padding[d]);
            if s == 0 {
                return Err(Error::invalid(format!("stride of spatial dim {d} is zero")));
            }
            if i + 2 * p < k {
                return Err(Error::shape(format!(
                    "spatial dim {d}: kernel {k} exceeds padded input {}",
                    i + 2 * p
                )));
            }
            let o = (i + 2 * p - k) / s + 1;
            geo.input[off + d] = i;
            geo.kernel[off + d] = k;
            geo.stride[off + d] = s;
            geo.padding[off + d] = p;
            geo.output[off + d] = o;
            geo.out_spatial.push(o);
        }
        Ok(geo)
    }

    pub fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix.
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.out_channels];
        s.extend_from_slice(&self.out_spatial);
        s
    }
}

/// Unrolls one sample `[C, D, H, W]` into a `[C*kd*kh*kw, od*oh*ow]` matrix.
pub(crate) fn im2col<T: Element>(input: &[T], geo: &ConvGeometry, cols: &mut [T]) {
    let [d, h, w] = geo.input;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let [od, oh, ow] = geo.output;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..geo.in_channels {
        let chan = &input[c * d * h * w..(c + 1) * d * h * w];
        for z in 0..kd {
            for y in 0..kh {
                for x in 0..kw {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + z) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            dst[o..o + oh * ow].fill(T::zero());
                            o += oh * ow;
                            continue;
                        }
                        let zbase = iz as usize * h * w;
                        for oy in 0..oh {
                            let iy = (oy * sh + y) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                dst[o..o + ow].fill(T::zero());
                                o += ow;
                                continue;
                            }
                            let base = zbase + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + x) as isize - pw as isize;
                                dst[o] = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    chan[base + ix as usize]
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub(crate) fn col2im<T: Element>(cols: &[T], geo: &ConvGeometry, out: &mut [T]) {
    let [d, h, w] = geo.input;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let [od, oh, ow] = geo.output;
    let plane = od * oh * ow;
    let mut row = 0;
    for c in 0..geo.in_channels {
        let chan = &mut out[c * d * h * w..(c + 1) * d * h * w];
        for z in 0..kd {
            for y in 0..kh {
                for x in 0..kw {
                    let src = &cols[row * plane..(row + 1) * plane];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * sd + z) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            o += oh * ow;
                            continue;
                        }
                        let zbase = iz as usize * h * w;
                        for oy in 0..oh {
                            let iy = (oy * sh + y) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                o += ow;
                                continue;
                            }
                            let base = zbase + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + x) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    let v = &mut chan[base + ix as usize];
                                    *v = *v + src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation of `input [N, Cin, s..]` with `kernel [Cout, Cin, k..]`.
pub fn conv_nd<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: &[usize],
    padding: &[usize],
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [geo.out_channels] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                geo.out_channels
            )));
        }
    }
    let mut out = Tensor::zeros(&geo.output_shape())?;
    let (rows, plane, in_len) = (geo.col_rows(), geo.out_plane(), geo.in_channels * geo.in_plane());
    let out_len = geo.out_channels * plane;
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
    for n in 0..geo.batch {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let b_mat: &[T] = if geo.is_pointwise() {
            x
        } else {
            im2col(x, &geo, &mut cols);
            &cols
        };
        let y = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        T::gemm(
            geo.out_channels,
            rows,
            plane,
            T::one(),
            kernel.data(),
            rows as isize,
            1,
            b_mat,
            plane as isize,
            1,
            T::zero(),
            y,
            plane as isize,
            1,
        );
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_nd`] with respect to input, kernel and bias.
pub(crate) struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv_nd_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: &[usize],
    padding: &[usize],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let geo = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (rows, plane, in_len) = (geo.col_rows(), geo.out_plane(), geo.in_channels * geo.in_plane());
    let out_len = geo.out_channels * plane;
    let mut dx = input.zeros_like();
    let mut dk = kernel.zeros_like();
    let mut db = Tensor::zeros(&[geo.out_channels])?;
    let pointwise = geo.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * plane] };
    let mut dcols = if pointwise || !need_input { Vec::new() } else { vec![T::zero(); rows * plane] };
    for n in 0..geo.batch {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let gy = &grad_out.data()[n * out_len..(n + 1) * out_len];
        let b_mat: &[T] = if pointwise {
            x
        } else {
            im2col(x, &geo, &mut cols);
            &cols
        };
        // dK += dY * cols^T
        T::gemm(
            geo.out_channels,
            plane,
            rows,
            T::one(),
            gy,
            plane as isize,
            1,
            b_mat,
            1,
            plane as isize,
            T::one(),
            dk.data_mut(),
            rows as isize,
            1,
        );
        for (co, chunk) in gy.chunks(plane).enumerate() {
            let s: T = chunk.iter().copied().sum();
            db.data_mut()[co] = db.data()[co] + s;
        }
        if need_input {
            let dx_n = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
            // dcols = K^T * dY
            let target: &mut [T] = if pointwise { dx_n } else { &mut dcols };
            T::gemm(
                rows,
                geo.out_channels,
                plane,
                T::one(),
                kernel.data(),
                1,
                rows as isize,
                gy,
                plane as isize,
                1,
                T::zero(),
                target,
                plane as isize,
                1,
            );
            if !pointwise {
                col2im(&dcols, &geo, &mut dx.data_mut()[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    Ok(ConvGrads { input: dx, kernel: dk, bias: db })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.5).unwrap();
        let k = Tensor::ones(&[1, 1, 1, 1]).unwrap();
        let y = conv_nd(&x, &k, None, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ramp_with_box_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64).unwrap();
        let k = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let y = conv_nd(&x, &k, None, &[1, 1], &[0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[45.0, 54.0, 81.0, 90.0]);
    }

    #[test]
    fn constant_cube() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3, 3]).unwrap();
        let k = Tensor::ones(&[1, 1, 2, 2, 2]).unwrap();
        let y = conv_nd(&x, &k, None, &[1, 1, 1], &[0, 0, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::ones(&[1, 2, 4, 4]).unwrap();
        let k = Tensor::ones(&[1, 3, 3, 3]).unwrap();
        let err = conv_nd(&x, &k, None, &[1, 1], &[0, 0]).unwrap_err().to_string();
        assert!(err.contains("dim 1"), "{err}");
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f32>::ones(&[1, 1, 2, 2]).unwrap();
        let k = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        assert!(conv_nd(&x, &k, None, &[1, 1], &[0, 0]).is_err());
        assert!(conv_nd(&x, &k, None, &[1, 1], &[1, 1]).is_ok());
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::<f64>::zeros(&[2, 1, 3]).unwrap();
        let k = Tensor::ones(&[2, 1, 1]).unwrap();
        let b = Tensor::new(&[2], vec![1.5, -2.0]).unwrap();
        let y = conv_nd(&x, &k, Some(&b), &[1], &[0]).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0]);
    }
}
