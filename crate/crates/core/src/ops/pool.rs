use crate::error::{Error, Result};
use crate::ops::conv::ConvGeometry;
use crate::tensor::{Element, Tensor};

/// Max pooling result together with the flat input index of every maximum.
pub(crate) struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max pooling over all spatial dims. Padded positions never win.
///
/// Ties go to the first position in scan order.
pub(crate) fn max_pool_nd<T: Element>(
    input: &Tensor<T>,
    window: &[usize],
    stride: &[usize],
    padding: &[usize],
) -> Result<MaxPoolOutput<T>> {
    let rank = input.rank();
    if rank < 3 {
        return Err(Error::shape(format!("max pool needs spatial dims, got {:?}", input.shape())));
    }
    let mut kshape = vec![1, input.shape()[1]];
    kshape.extend_from_slice(window);
    let geo = ConvGeometry::new(input.shape(), &kshape, stride, padding)?;
    for (d, (&w, &p)) in window.iter().zip(padding).enumerate() {
        if p >= w {
            return Err(Error::invalid(format!(
                "spatial dim {d}: padding {p} must be smaller than window {w}"
            )));
        }
    }
    let [d, h, w] = geo.input;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.padding;
    let [od, oh, ow] = geo.output;
    let planes = geo.batch * geo.in_channels;
    let (in_plane, out_plane) = (d * h * w, od * oh * ow);
    let mut out_shape = vec![geo.batch, geo.in_channels];
    out_shape.extend_from_slice(&geo.out_spatial);
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut argmax = Vec::with_capacity(planes * out_plane);
    let x = input.data();
    for p in 0..planes {
        let base = p * in_plane;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for z in 0..kd {
                        let iz = (oz * sd + z) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..kh {
                            let iy = (oy * sh + y) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for xx in 0..kw {
                                let ix = (ox * sw + xx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + (iz as usize * h + iy as usize) * w + ix as usize;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok(MaxPoolOutput { output: Tensor::new(&out_shape, out)?, argmax })
}

pub(crate) fn max_pool_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

/// Mean over all spatial positions: `[N, C, s..] -> [N, C]`.
pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() < 3 {
        return Err(Error::shape(format!(
            "global average pool needs spatial dims, got {:?}",
            input.shape()
        )));
    }
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let plane: usize = input.spatial().iter().product();
    let inv = T::from_f64(1.0 / plane as f64);
    let data = input.data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[n, c], data)
}

pub(crate) fn global_avg_pool_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plane: usize = input_shape[2..].iter().product();
    let inv = T::from_f64(1.0 / plane as f64);
    let mut data = Vec::with_capacity(plane * grad_out.len());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(input_shape, data)
}
