//! Identity/content disentanglement GAN for unsupervised domain-adaptive
//! person re-identification.
//!
//! The crate is organized around the pipeline:
//!
//! * [`data`]: manifests, normalization, synthetic toy data
//! * [`nn`]: trunk, identity/content heads, generator, discriminator, checkpoints
//! * [`losses`]: identity, KL, adversarial, reconstruction and weighted target losses
//! * [`miner`]: mutual top-k same-identity pair mining on unlabelled data
//! * [`metrics`]: cross-camera CMC and mAP
//! * [`train`]: the three training stages and their schedules

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod miner;
pub mod nn;
pub mod parallel;
pub mod train;

pub use error::{Error, Result};
pub use parallel::Parallelism;
