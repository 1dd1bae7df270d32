//! Benchmark inputs shared by the criterion targets.

use volcam::Tensor;

/// Deterministic pseudo-random tensor with values in `[-1, 1)`.
pub fn ramp(shape: &[usize]) -> Tensor<f32> {
    let mut state = 0x9e37_79b9u32;
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
        (state >> 8) as f32 / (1u32 << 23) as f32 - 1.0
    })
    .expect("nonempty shape")
}
