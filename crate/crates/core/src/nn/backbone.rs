//! Pluggable re-identification trunk.
//!
//! A backbone splits into shared layers and a tail. The identity encoder is
//! `shared -> tail -> pooling -> projection`; the content encoder re-uses the
//! shared feature map and runs its own copy of the tail.

use candle::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Mode, WeightInit};
use super::params::Scope;
use crate::{Error, Result};

/// Blocks mapping a feature map to a feature map.
pub trait FeatureBlocks: Send + Sync {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor>;
}

/// Shared trunk plus identity tail of a re-identification network.
pub trait Backbone: Send + Sync {
    /// Shared layers, consumed by both encoders.
    fn shared(&self, images: &Tensor, mode: Mode) -> Result<Tensor>;

    /// The identity branch's final blocks.
    fn identity_tail(&self, features: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Channel count of the tail output.
    fn tail_channels(&self) -> usize;

    /// A freshly initialized copy of the tail architecture, registered under `scope`.
    fn duplicate_tail(&self, scope: &Scope) -> Result<Box<dyn FeatureBlocks>>;
}

/// Widths of the three stages of [`TinyTrunk`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkChannels(pub [usize; 3]);

impl Default for TrunkChannels {
    fn default() -> Self {
        TrunkChannels([64, 128, 256])
    }
}

/// conv3x3(stride 2) + BN + ReLU, then conv3x3 + BN + ReLU.
struct Stage {
    down: Conv2d,
    down_bn: BatchNorm2d,
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Stage {
    fn new(scope: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            down: Conv2d::new(&scope.pp("down"), c_in, c_out, 3, 2, 1, false, WeightInit::Default)?,
            down_bn: BatchNorm2d::new(&scope.pp("down_bn"), c_out)?,
            conv: Conv2d::new(&scope.pp("conv"), c_out, c_out, 3, 1, 1, false, WeightInit::Default)?,
            bn: BatchNorm2d::new(&scope.pp("bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.down_bn.forward(&self.down.forward(x)?, mode)?.relu()?;
        Ok(self.bn.forward(&self.conv.forward(&x)?, mode)?.relu()?)
    }
}

struct Tail {
    stages: Vec<Stage>,
}

impl Tail {
    fn new(scope: &Scope, channels: &TrunkChannels) -> Result<Self> {
        let c = channels.0;
        Ok(Self {
            stages: vec![
                Stage::new(&scope.pp("stage2"), c[0], c[1])?,
                Stage::new(&scope.pp("stage3"), c[1], c[2])?,
            ],
        })
    }
}

impl FeatureBlocks for Tail {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = x.clone();
        for s in &self.stages {
            x = s.forward(&x, mode)?;
        }
        Ok(x)
    }
}

/// Three-stage reference trunk; stage 1 is shared, stages 2 and 3 form the tail.
pub struct TinyTrunk {
    channels: TrunkChannels,
    stem: Stage,
    tail: Tail,
}

impl TinyTrunk {
    pub fn new(scope: &Scope, channels: TrunkChannels) -> Result<Self> {
        if channels.0.iter().any(|&c| c == 0) {
            return Err(Error::config("trunk channel widths must be positive"));
        }
        Ok(Self {
            channels,
            stem: Stage::new(&scope.pp("stage1"), 3, channels.0[0])?,
            tail: Tail::new(scope, &channels)?,
        })
    }
}

impl Backbone for TinyTrunk {
    fn shared(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.stem.forward(images, mode)
    }

    fn identity_tail(&self, features: &Tensor, mode: Mode) -> Result<Tensor> {
        self.tail.forward(features, mode)
    }

    fn tail_channels(&self) -> usize {
        self.channels.0[2]
    }

    fn duplicate_tail(&self, scope: &Scope) -> Result<Box<dyn FeatureBlocks>> {
        Ok(Box::new(Tail::new(scope, &self.channels)?))
    }
}
