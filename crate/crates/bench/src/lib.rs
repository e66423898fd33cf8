//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treeclust_core::metrics::LabeledAssignment;
use treeclust_core::TreeTopology;

/// Edge probabilities in (0.05, 0.95) for `rows` samples.
pub fn edge_probs(rows: usize, depth: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, (1 << depth) - 1), |_| rng.random_range(0.05..0.95))
}

/// Random hard assignment of `n` samples over the active leaves.
pub fn assignment(n: usize, classes: usize, topo: &TreeTopology, seed: u64) -> LabeledAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active: Vec<usize> = topo.active_leaves().collect();
    let leaves = (0..n).map(|_| active[rng.random_range(0..active.len())]).collect();
    let truth = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledAssignment::new(leaves, truth, classes, topo.clone()).expect("valid fixture")
}

/// Standard normal inputs.
pub fn inputs(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, dim), |_| rng.sample(rand_distr::StandardNormal))
}
