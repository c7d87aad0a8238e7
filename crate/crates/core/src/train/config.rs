use serde::{Deserialize, Serialize};

use crate::data::ImageSize;
use crate::losses::{LossWeights, ReconTarget};
use crate::nn::{ModelConfig, TrunkChannels};
use crate::{Error, Result};

/// Adaptive-moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamParams {
    fn validate(&self, what: &str) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("{what}: betas must lie in [0, 1), eps > 0, weight_decay >= 0")))
        }
    }
}

/// Source-only pretraining of the identity encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Leading epochs in which only the classifier layer is trained.
    pub warmup_epochs: usize,
    pub optimizer: AdamParams,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1.5e-4,
            warmup_epochs: 20,
            optimizer: AdamParams::default(),
        }
    }
}

/// Generative pretraining with the identity side frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    /// Images per batch; always an even number (whole pairs).
    pub batch_size: usize,
    /// Learning rate of the content encoder and generator.
    pub lr: f64,
    pub discriminator_lr: f64,
    pub optimizer: AdamParams,
    pub discriminator_momentum: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 2e-4,
            discriminator_lr: 2e-4,
            optimizer: AdamParams::default(),
            discriminator_momentum: 0.9,
        }
    }
}

/// Joint training with alternating source and target steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Config {
    /// Counted on the source dataset.
    pub epochs: usize,
    pub source_batch_size: usize,
    /// Images per target batch (whole pairs).
    pub target_batch_size: usize,
    pub lr: f64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            epochs: 400,
            source_batch_size: 32,
            target_batch_size: 16,
            lr: 2e-5,
        }
    }
}

/// Everything the three training stages need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub recon_target: ReconTarget,
    pub miner_k: usize,
    pub eval_batch_size: usize,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            recon_target: ReconTarget::default(),
            miner_k: 5,
            eval_batch_size: 64,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
        }
    }
}

fn positive(value: usize, what: &str) -> Result<()> {
    if value == 0 {
        return Err(Error::config(format!("{what} must be positive")));
    }
    Ok(())
}

fn rate(value: f64, what: &str) -> Result<()> {
    if !(value.is_finite() && value >= 0.0) {
        return Err(Error::config(format!("{what} must be finite and >= 0, got {value}")));
    }
    Ok(())
}

fn pair_batch(value: usize, what: &str) -> Result<()> {
    if value < 2 || value % 2 != 0 {
        return Err(Error::config(format!("{what} must be an even number >= 2 (whole pairs), got {value}")));
    }
    Ok(())
}

impl TrainConfig {
    /// Small preset used by the toy end-to-end run: 48x16 images, a four-block
    /// generator and narrow layers.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model = ModelConfig {
            image_size: ImageSize::new(48, 16),
            latent_dim: 32,
            trunk_channels: TrunkChannels([16, 32, 64]),
            generator_blocks: 4,
            generator_channels: 64,
            discriminator_blocks: 3,
            discriminator_channels: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        cfg.stage1 = Stage1Config {
            epochs: 40,
            batch_size: 16,
            lr: 2e-3,
            warmup_epochs: 5,
            ..Stage1Config::default()
        };
        cfg.stage2 = Stage2Config {
            epochs: 30,
            lr: 1e-3,
            discriminator_lr: 1e-3,
            ..Stage2Config::default()
        };
        cfg.stage3 = Stage3Config {
            epochs: 10,
            source_batch_size: 16,
            target_batch_size: 16,
            lr: 2e-4,
        };
        // The reference KL weight leaves the content code free to carry
        // identity at this scale; see the preservation check.
        cfg.losses.lambda_kl = 0.5;
        cfg.eval_batch_size = 32;
        cfg
    }

    /// Checks every invariant before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        positive(self.miner_k, "miner_k")?;
        positive(self.eval_batch_size, "eval_batch_size")?;

        let s1 = &self.stage1;
        if s1.epochs < 2 {
            return Err(Error::config("stage1.epochs must be at least 2 (cosine schedule endpoint)"));
        }
        if s1.warmup_epochs >= s1.epochs {
            return Err(Error::config(format!(
                "stage1.warmup_epochs ({}) must be below stage1.epochs ({})",
                s1.warmup_epochs, s1.epochs
            )));
        }
        if s1.batch_size < 2 {
            return Err(Error::config("stage1.batch_size must be at least 2 (batch normalization)"));
        }
        rate(s1.lr, "stage1.lr")?;
        s1.optimizer.validate("stage1.optimizer")?;

        let s2 = &self.stage2;
        positive(s2.epochs, "stage2.epochs")?;
        pair_batch(s2.batch_size, "stage2.batch_size")?;
        rate(s2.lr, "stage2.lr")?;
        rate(s2.discriminator_lr, "stage2.discriminator_lr")?;
        s2.optimizer.validate("stage2.optimizer")?;
        if !(0.0..1.0).contains(&s2.discriminator_momentum) {
            return Err(Error::config("stage2.discriminator_momentum must lie in [0, 1)"));
        }

        let s3 = &self.stage3;
        positive(s3.epochs, "stage3.epochs")?;
        if s3.source_batch_size < 2 {
            return Err(Error::config("stage3.source_batch_size must be at least 2 (batch normalization)"));
        }
        pair_batch(s3.target_batch_size, "stage3.target_batch_size")?;
        rate(s3.lr, "stage3.lr")
    }
}
