//! Shared fixtures for the benchmarks.

use lacmfer::data::generate;
use lacmfer::{RunConfig, Tensor, TrainingData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The default problem with its training splits.
pub fn default_problem() -> (RunConfig, TrainingData) {
    let cfg = RunConfig::default();
    let datasets = generate(&cfg.data, cfg.arch.input_dim, cfg.arch.num_classes)
        .expect("default data config is valid")
        .datasets;
    let data = TrainingData::from_datasets(&datasets).expect("generated layout is complete");
    (cfg, data)
}

/// Uniform random `(rows x cols)` tensor.
pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}
