//! Shared fixtures for the benchmarks.

use cma_core::tensor::Tensor;

/// Deterministic values in `[-1, 1)` with no repeating structure worth
/// caching.
pub fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        ((i.wrapping_mul(2654435761) % 2001) as f32 / 1000.0) - 1.0
    })
}

/// Row-major `n×m` cost matrix in `[0, 1]`.
pub fn costs(n: usize, m: usize) -> Vec<f64> {
    (0..n * m)
        .map(|i| ((i * 7919) % 101) as f64 / 100.0)
        .collect()
}
