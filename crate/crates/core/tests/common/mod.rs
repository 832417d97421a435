//! Tasks and settings shared by the integration tests.
#![allow(dead_code)]

use w2s_lab::metrics::median;
use w2s_lab::*;

pub const SEEDS: u64 = 5;

/// Nonlinear teacher over a rank-8 latent factor observed through 512 noisy features.
pub fn reference_mlp_task(seed: u64) -> DatasetBundle {
    let spec = TaskSpec::new(20_000, 512, Teacher::RandomMlp, 0.0, 100 + seed).with_features(FeatureModel::LowRank {
        rank: 8,
        noise_scale: 2.0,
    });
    generate_task(&spec).expect("reference task")
}

pub fn probe(k: usize) -> ModelSpec {
    ModelSpec::linear_probe(k, 512).unwrap()
}

pub fn reference_ladder() -> Vec<ModelSpec> {
    [8, 32, 128, 512].into_iter().map(probe).collect()
}

pub fn reference_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

pub fn med(values: impl IntoIterator<Item = f64>) -> f64 {
    median(&values.into_iter().collect::<Vec<_>>()).unwrap_or(f64::NAN)
}
