//! Shared fixture builders for the criterion benchmarks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use taskgrad::linalg::SkewParam;
use taskgrad::net::{Head, LossKind, Mlp};
use taskgrad::tasks::{AvocadoLoss, Batch};
use taskgrad::train::{CombinerKindConfig, TrainConfig, TrainState};
use taskgrad::DenseMatrix;

/// Deterministic set of `k` task-gradient batches of shape `b × d`.
pub fn gradient_set(k: usize, b: usize, d: usize, seed: u64) -> Vec<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| DenseMatrix::from_fn(b, d, |_, _| rng.random_range(-1.0..1.0)))
        .collect()
}

/// Deterministic skew coefficients for a `dim × dim` generator.
pub fn skew(dim: usize, seed: u64) -> SkewParam {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SkewParam::zeros(dim);
    for p in s.params_mut() {
        *p = rng.random_range(-1.5..1.5);
    }
    s
}

/// A two-task quadratic training state with rotations and magnitude
/// equalization on, plus its single-sample input batch.
pub fn convex_state(seed: u64) -> (TrainState, Batch) {
    let mut config = TrainConfig::baseline(seed);
    config.combiner = CombinerKindConfig::ScaleOnly;
    config.rotations_enabled = true;
    config.network.lr = 0.01;
    config.rotation.lr = 0.005;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let backbone = Mlp::seeded(&[2, 16, 2], &mut rng).expect("valid dims");
    let heads = vec![
        Head::new(Mlp::identity(), LossKind::Custom(Arc::new(AvocadoLoss { shift: 0.0 }))),
        Head::new(Mlp::identity(), LossKind::Custom(Arc::new(AvocadoLoss { shift: 1.0 }))),
    ];
    let state = TrainState::new(config, backbone, heads).expect("valid config");
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(0);
    let x = DenseMatrix::from_fn(1, 2, |_, _| data_rng.random_range(-2.0..2.0));
    let batch = Batch { x, labels: vec![DenseMatrix::zeros(1, 1), DenseMatrix::zeros(1, 1)] };
    (state, batch)
}
