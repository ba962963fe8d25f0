//! Fixtures shared by the benchmarks.

use dps_core::train::training_batch;
use dps_core::{Example, Model, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A desk-sized model around an untrained backbone, plus one training batch.
pub fn desk_fixture(strategy: &str) -> (TrainConfig, Model, Vec<Example>) {
    let mut cfg = TrainConfig::desk();
    cfg.strategy = strategy.parse().expect("known strategy");
    let backbone = cfg.lm_config().init_backbone(&mut ChaCha8Rng::seed_from_u64(0));
    let model = Model::new(cfg.model_config(), cfg.vocab(), backbone, 1).expect("valid desk config");
    let bench = cfg.benchmark().expect("valid desk data");
    let (batch, _) = training_batch(&cfg, &bench, 0).expect("batch");
    (cfg, model, batch)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}
