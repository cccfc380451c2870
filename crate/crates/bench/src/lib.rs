//! Input generators shared by the benchmarks.

use metaloss_core::autodiff::Tensor;
use metaloss_core::gp::{correct_constraints, random_tree, GpConfig};
use metaloss_core::smoothing::{bench_inputs, log_softmax_rows};
use metaloss_core::ExprTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class counts of the smoothing-loss scaling benchmark.
pub const CLASS_COUNTS: [usize; 4] = [10, 100, 1_000, 10_000];

/// Row-wise log-probabilities `[batch, classes]` and one target per row.
pub fn log_probabilities(classes: usize, batch: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let (logits, targets) = bench_inputs(classes, batch, seed);
    (log_softmax_rows(&logits, classes), targets)
}

/// `n` random trees that contain both the prediction and the target.
pub fn loss_trees(n: usize, seed: u64) -> Vec<ExprTree> {
    let cfg = GpConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = random_tree(&cfg, &mut rng);
            correct_constraints(&t, cfg.max_depth, &mut rng)
        })
        .collect()
}

/// Standard-uniform features `[rows, cols]` and one-hot targets `[rows, classes]`.
pub fn classification_batch(rows: usize, cols: usize, classes: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut y = vec![0.0; rows * classes];
    for r in 0..rows {
        y[r * classes + rng.random_range(0..classes)] = 1.0;
    }
    (
        Tensor::matrix(rows, cols, x).expect("shape matches"),
        Tensor::matrix(rows, classes, y).expect("shape matches"),
    )
}
