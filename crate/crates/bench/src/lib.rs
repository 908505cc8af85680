//! Shared fixtures for the criterion benches.

use polytax_core::Tensor;

/// Deterministic, well-spread test tensor (no RNG so benches are comparable run to run).
pub fn fixture(shape: &[usize]) -> Tensor {
    let mut i = 0u64;
    Tensor::from_fn(shape, || {
        i += 1;
        ((i.wrapping_mul(2_654_435_761) % 2001) as f64 - 1000.0) / 1000.0
    })
}
