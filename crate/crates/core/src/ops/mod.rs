//! Forward/backward kernels for the fixed operator set.
//!
//! The public functions here are plain forward evaluations; the autodiff
//! wiring lives in [`crate::autodiff`].

pub mod activation;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
pub mod resample;

pub use activation::{activate, sigmoid_scalar, Activation};
pub use conv::conv_nd;
pub use dense::dense;
pub use pool::global_avg_pool;
pub use resample::{linear_taps, nearest_taps, resize_nd, upsample_nd, Tap, UpsampleMode};

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Max pooling forward pass (see [`crate::autodiff::Tape::max_pool`] for the differentiable version).
pub fn pool_max_nd<T: Element>(
    input: &Tensor<T>,
    window: &[usize],
    stride: &[usize],
    padding: &[usize],
) -> Result<Tensor<T>> {
    Ok(pool::max_pool_nd(input, window, stride, padding)?.output)
}
