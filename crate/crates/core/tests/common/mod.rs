#![allow(dead_code)]

use cdal::networks::{DiscriminatorConfig, GeneratorConfig};
use cdal::training::{TrainConfig, Trainer};
use cdal::nn::Real;
use cdal::NoiseSchedule;

/// 8x8 generator small enough for finite differences.
pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 8,
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        blocks_per_scale: 1,
        time_embed_dim: 8,
        latent_dim: 4,
        condition_channels: 2,
        encoder_channels: 4,
        ..Default::default()
    }
}

pub fn tiny_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        resolution: 8,
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        blocks_per_scale: 1,
        time_embed_dim: 8,
        ..Default::default()
    }
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        attn_scale: 4,
        batch_size: 2,
        max_steps: 4,
        seed,
        ..Default::default()
    }
}

pub fn tiny_trainer<F: Real>(config: TrainConfig, timesteps: usize) -> Trainer<F> {
    Trainer::new(
        config,
        &tiny_generator(),
        &tiny_discriminator(),
        NoiseSchedule::with_default_bounds(timesteps).unwrap(),
    )
    .unwrap()
}
