//! Deterministic inputs for the kernel benchmarks.

use mambacaps_core::Tensor;

/// Smooth pseudo-random values in `[lo, hi)`, fixed by `salt`.
pub fn filled(shape: &[usize], lo: f64, hi: f64, salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let t = ((i as u64)
                .wrapping_mul(2654435761)
                .wrapping_add(salt.wrapping_mul(40503))
                % 10007) as f64
                / 10007.0;
            lo + (hi - lo) * t
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
