//! Differentiable building blocks: trunk, identity and content heads,
//! feature-swap generator and patch discriminator.

mod backbone;
mod checkpoint;
mod conv;
mod gan;
mod layers;
mod model;
mod params;

pub use self::backbone::{Backbone, FeatureBlocks, TinyTrunk, TrunkChannels};
pub use self::conv::{conv2d, conv_transpose2d};
pub use self::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use self::gan::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
pub use self::layers::{
    dropout, global_avg_pool, leaky_relu, BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, InstanceNorm2d, Linear, Mode,
    WeightInit,
};
pub use self::model::{
    global_score, reparameterize, ContentCodes, GeneratedQuad, ModelConfig, Noise, QuadNoise, SwapModes, SwapOutput,
    UdGan,
    ALL_GROUPS, GROUP_CLASSIFIER, GROUP_CONTENT, GROUP_DISCRIMINATOR, GROUP_GENERATOR, GROUP_ID_HEAD, GROUP_TRUNK,
    IDENTITY_GROUPS,
};
pub use self::params::{Init, Param, ParamKind, ParamStore, Scope};

use candle::Device;

use crate::{Error, Result};

/// Compute device named by `UDGAN_DEVICE` (`cpu` when unset).
pub fn device_from_env() -> Result<Device> {
    match std::env::var("UDGAN_DEVICE") {
        Err(_) => Ok(Device::Cpu),
        Ok(v) => parse_device(&v),
    }
}

pub fn parse_device(name: &str) -> Result<Device> {
    let name = name.trim().to_ascii_lowercase();
    if name.is_empty() || name == "cpu" {
        return Ok(Device::Cpu);
    }
    if let Some(rest) = name.strip_prefix("cuda") {
        let ordinal = rest.trim_start_matches(':');
        let ordinal: usize = if ordinal.is_empty() {
            0
        } else {
            ordinal
                .parse()
                .map_err(|_| Error::config(format!("bad device `{name}`")))?
        };
        return Device::new_cuda(ordinal)
            .map_err(|e| Error::config(format!("device `{name}` unavailable: {e}")));
    }
    Err(Error::config(format!("unknown device `{name}`; expected cpu or cuda[:N]")))
}
