//! Few-step conditional diffusion for image segmentation.
//!
//! A generator predicts the clean label `x0` directly from a noised label, the
//! diffusion step, a random latent vector and the conditioning image. A
//! time-conditioned discriminator is trained at every step to tell real
//! `(x_t, x_{t-1})` pairs from generated ones, and the channel mean of its
//! feature maps becomes a spatial attention mask that reweights the
//! ground-truth label before it is noised for the generator update.
//!
//! Module map:
//!
//! - [`schedule`]: noise schedule and the closed-form forward / posterior steps
//! - [`nn`]: tensor graph with reverse-mode gradients, parameters and Adam
//! - [`networks`]: generator, discriminator, embeddings and checkpoints
//! - [`attention`]: discriminator features to spatial attention
//! - [`training`]: alternating discriminator / generator updates
//! - [`sampling`]: reverse process and multi-instance inference
//! - [`metrics`]: Dice, IoU, precision, recall and fold aggregation
//! - [`data`]: synthetic scenes, folder ingestion, k-fold splits
//! - [`config`]: declarative run configuration with dotted-key overrides

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
