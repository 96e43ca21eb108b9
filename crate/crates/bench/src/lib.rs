//! Fixed inputs shared by the kernel benches.

use ndarray::Array2;
use upcl_core::geometry::muller_random;
use upcl_core::losses::FeatureBatch;
use upcl_core::rng::seeded;

/// `n x d` unit rows drawn from a seeded normal.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
    muller_random(n, d, &mut seeded(seed))
        .expect("positive dimension")
        .rows()
        .to_owned()
}

/// Uniform costs in [0, 1) from a small LCG, so the matrix has no structure.
pub fn cost_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    Array2::from_shape_fn((rows, cols), |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    })
}

/// Unit features with labels cycling over `classes`.
pub fn batch(n: usize, d: usize, classes: usize, seed: u64) -> FeatureBatch {
    let labels = (0..n).map(|i| i % classes).collect();
    FeatureBatch::new(unit_rows(n, d, seed), labels).expect("matching lengths")
}
