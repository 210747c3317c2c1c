#![allow(dead_code)]

use mcgan::data::{toy_dataset, ToyConfig, ToySample, TrainingSet};
use mcgan::trainer::{AugmentFlags, TrainConfig};
use mcgan::Hyperparams;

/// A 16×16, two-block configuration that trains in milliseconds per step.
pub fn tiny_hp() -> Hyperparams {
    Hyperparams {
        width: 16,
        height: 16,
        n_blocks: 2,
        z_dim: 4,
        text_dim: 16,
        code_dim: 4,
        seed_channels: 8,
        disc_channels: 4,
        ..Hyperparams::toy()
    }
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hyperparams: tiny_hp(),
        batch: 4,
        epochs: 2,
        seed,
        augment: AugmentFlags::default(),
        ..TrainConfig::toy()
    }
}

pub fn toy_cfg(hp: &Hyperparams) -> ToyConfig {
    ToyConfig {
        size: hp.width,
        text_dim: hp.text_dim,
        ..ToyConfig::default()
    }
}

pub fn toy_samples(n: usize, seed: u64, hp: &Hyperparams) -> Vec<ToySample> {
    toy_dataset(n, seed, &toy_cfg(hp)).unwrap()
}

pub fn tiny_set(n: usize, seed: u64) -> TrainingSet {
    TrainingSet::from_toy(&toy_samples(n, seed, &tiny_hp())).unwrap()
}
