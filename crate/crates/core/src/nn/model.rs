use candle::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, FeatureBlocks, TinyTrunk, TrunkChannels};
use super::gan::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use super::layers::{global_avg_pool, Ctx, Linear, Mode, WeightInit};
use super::params::{ParamStore, Scope};
use crate::data::{ImageSize, Normalization};
use crate::{Error, Result};

pub const GROUP_TRUNK: &str = "trunk";
pub const GROUP_ID_HEAD: &str = "id_head";
pub const GROUP_CLASSIFIER: &str = "classifier";
pub const GROUP_CONTENT: &str = "content_head";
pub const GROUP_GENERATOR: &str = "generator";
pub const GROUP_DISCRIMINATOR: &str = "discriminator";

/// Parameter groups of the identity encoder together with its classifier.
pub const IDENTITY_GROUPS: [&str; 3] = [GROUP_TRUNK, GROUP_ID_HEAD, GROUP_CLASSIFIER];
/// Every parameter group.
pub const ALL_GROUPS: [&str; 6] = [
    GROUP_TRUNK,
    GROUP_ID_HEAD,
    GROUP_CLASSIFIER,
    GROUP_CONTENT,
    GROUP_GENERATOR,
    GROUP_DISCRIMINATOR,
];

/// Architecture of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: ImageSize,
    /// Dimension `d` of both the identity and the content code.
    pub latent_dim: usize,
    /// Number of source training classes; 0 means "take it from the source manifest".
    pub num_classes: usize,
    pub trunk_channels: TrunkChannels,
    pub generator_blocks: usize,
    pub generator_channels: usize,
    pub discriminator_blocks: usize,
    pub discriminator_channels: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: ImageSize::new(384, 128),
            latent_dim: 512,
            num_classes: 0,
            trunk_channels: TrunkChannels::default(),
            generator_blocks: 6,
            generator_channels: 512,
            discriminator_blocks: 7,
            discriminator_channels: 64,
            leaky_slope: 0.2,
            dropout: 0.5,
            normalization: Normalization::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::config("leaky_slope must be finite and >= 0"));
        }
        self.normalization.validate()?;
        crate::data::check_generator_divisibility(self.image_size, self.generator_blocks)
    }
}

/// Posterior parameters and the sampled content code.
#[derive(Debug, Clone)]
pub struct ContentCodes {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub v_c: Tensor,
}

/// Source of the reparameterization noise for one encoding call.
#[derive(Debug, Clone, Copy)]
pub enum Noise<'a> {
    /// Fresh standard-normal draw from the context.
    Sample,
    /// `v_C = mu`.
    Zero,
    Given(&'a Tensor),
}

/// Noise policy for the two images of a pair.
#[derive(Debug, Clone)]
pub enum QuadNoise {
    /// Independent draws for `X1` and `X2`.
    Independent,
    /// One draw reused for both images.
    SharedSample,
    /// The given `[N, d]` noise for both images.
    Shared(Tensor),
    Zero,
    Given(Tensor, Tensor),
}

/// The four swap images; `get(i, j)` is `G(v_Id of X_i, v_C of X_j)` (0-based).
#[derive(Debug, Clone)]
pub struct GeneratedQuad {
    images: [Tensor; 4],
}

impl GeneratedQuad {
    /// Parts in order `X11, X12, X21, X22`.
    pub fn from_parts(images: [Tensor; 4]) -> Self {
        Self { images }
    }

    pub fn get(&self, i: usize, j: usize) -> &Tensor {
        &self.images[2 * i + j]
    }

    pub fn parts(&self) -> &[Tensor; 4] {
        &self.images
    }

    /// All four parts stacked along the batch axis.
    pub fn stacked(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&self.images, 0)?)
    }
}

/// Per-branch modes for a swap pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapModes {
    /// Trunk and identity head.
    pub identity: Mode,
    pub content: Mode,
    pub generator: Mode,
    /// Cut gradients into the trunk and identity head.
    pub detach_identity: bool,
}

impl SwapModes {
    /// Identity side frozen: eval-mode statistics and no gradient.
    pub fn frozen_identity() -> Self {
        Self {
            identity: Mode::Eval,
            content: Mode::Train,
            generator: Mode::Train,
            detach_identity: true,
        }
    }
}

impl From<Mode> for SwapModes {
    fn from(mode: Mode) -> Self {
        Self {
            identity: mode,
            content: mode,
            generator: mode,
            detach_identity: false,
        }
    }
}

/// Everything a swap-generation pass produces.
#[derive(Debug, Clone)]
pub struct SwapOutput {
    pub quad: GeneratedQuad,
    pub v_id: [Tensor; 2],
    pub content: [ContentCodes; 2],
}

/// Identity encoder, content encoder, generator and discriminator sharing one
/// parameter store.
pub struct UdGan {
    config: ModelConfig,
    params: ParamStore,
    backbone: Box<dyn Backbone>,
    id_proj: Linear,
    classifier: Linear,
    content_tail: Box<dyn FeatureBlocks>,
    fc_mu: Linear,
    fc_logvar: Linear,
    generator: Generator,
    discriminator: Discriminator,
}

impl std::fmt::Debug for UdGan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UdGan")
            .field("config", &self.config)
            .field("params", &self.params)
            .finish()
    }
}

impl UdGan {
    /// Model with the reference [`TinyTrunk`] backbone.
    pub fn new(config: ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        Self::with_backbone(config, seed, device, |scope, cfg| {
            Ok(Box::new(TinyTrunk::new(scope, cfg.trunk_channels)?))
        })
    }

    /// Model with a custom backbone; the factory registers its parameters under the given scope.
    pub fn with_backbone<F>(config: ModelConfig, seed: u64, device: &Device, backbone: F) -> Result<Self>
    where
        F: FnOnce(&Scope, &ModelConfig) -> Result<Box<dyn Backbone>>,
    {
        config.validate()?;
        if config.num_classes < 2 {
            return Err(Error::config(format!(
                "model needs at least 2 source classes, got {}",
                config.num_classes
            )));
        }
        let params = ParamStore::new(seed, device.clone());
        let root = params.root();
        let d = config.latent_dim;
        let backbone = backbone(&root.pp(GROUP_TRUNK), &config)?;
        let tail_c = backbone.tail_channels();
        let id_proj = Linear::new(&root.pp(GROUP_ID_HEAD).pp("proj"), tail_c, d, WeightInit::Default)?;
        let classifier = Linear::new(&root.pp(GROUP_CLASSIFIER), d, config.num_classes, WeightInit::Default)?;
        let content = root.pp(GROUP_CONTENT);
        let content_tail = backbone.duplicate_tail(&content.pp("tail"))?;
        let fc_mu = Linear::new(&content.pp("fc_mu"), tail_c, d, WeightInit::Default)?;
        let fc_logvar = Linear::new(&content.pp("fc_logvar"), tail_c, d, WeightInit::Default)?;
        let generator = Generator::new(
            &root.pp(GROUP_GENERATOR),
            GeneratorSpec {
                image_size: config.image_size,
                latent_dim: d,
                blocks: config.generator_blocks,
                base_channels: config.generator_channels,
                leaky_slope: config.leaky_slope,
                dropout: config.dropout,
            },
            &config.normalization,
        )?;
        let discriminator = Discriminator::new(
            &root.pp(GROUP_DISCRIMINATOR),
            DiscriminatorSpec {
                image_size: config.image_size,
                blocks: config.discriminator_blocks,
                base_channels: config.discriminator_channels,
                leaky_slope: config.leaky_slope,
            },
        )?;
        Ok(Self {
            config,
            params,
            backbone,
            id_proj,
            classifier,
            content_tail,
            fc_mu,
            fc_logvar,
            generator,
            discriminator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let dims = x.dims();
        let size = self.config.image_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != size.height || dims[3] != size.width {
            return Err(Error::shape(format!(
                "expected images [N, 3, {}, {}], got {dims:?}",
                size.height, size.width
            )));
        }
        Ok(dims[0])
    }

    /// Shared trunk feature map.
    pub fn shared_features(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_images(images)?;
        self.backbone.shared(images, mode)
    }

    /// Identity code from a shared feature map.
    pub fn identity_from_features(&self, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let pooled = global_avg_pool(&self.backbone.identity_tail(features, mode)?)?;
        self.id_proj.forward(&pooled)
    }

    /// `v_Id`, `[N, d]`.
    pub fn encode_identity(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let f = self.shared_features(images, mode)?;
        self.identity_from_features(&f, mode)
    }

    /// Classifier logits over the source classes.
    pub fn classify(&self, v_id: &Tensor) -> Result<Tensor> {
        self.classifier.forward(v_id)
    }

    /// Content posterior from a shared feature map, with reparameterized sample.
    pub fn content_from_features(&self, features: &Tensor, mode: Mode, noise: Noise, ctx: &Ctx) -> Result<ContentCodes> {
        let pooled = global_avg_pool(&self.content_tail.forward(features, mode)?)?;
        let mu = self.fc_mu.forward(&pooled)?;
        let logvar = self.fc_logvar.forward(&pooled)?;
        let v_c = reparameterize(&mu, &logvar, noise, ctx)?;
        Ok(ContentCodes { mu, logvar, v_c })
    }

    pub fn encode_content(&self, images: &Tensor, mode: Mode, noise: Noise, ctx: &Ctx) -> Result<ContentCodes> {
        let f = self.shared_features(images, mode)?;
        self.content_from_features(&f, mode, noise, ctx)
    }

    /// Images `[N, 3, H, W]` in the normalized pixel range.
    pub fn generate(&self, v_id: &Tensor, v_c: &Tensor, mode: Mode, ctx: &Ctx) -> Result<Tensor> {
        self.generator.forward(v_id, v_c, mode, ctx)
    }

    /// All four identity/content combinations in one generator pass.
    pub fn generate_quad(&self, v_id: [&Tensor; 2], v_c: [&Tensor; 2], mode: Mode, ctx: &Ctx) -> Result<GeneratedQuad> {
        let n = v_id[0].dim(0)?;
        let ids = Tensor::cat(&[v_id[0], v_id[0], v_id[1], v_id[1]], 0)?;
        let cs = Tensor::cat(&[v_c[0], v_c[1], v_c[0], v_c[1]], 0)?;
        let out = self.generate(&ids, &cs, mode, ctx)?;
        let parts = [0, 1, 2, 3].map(|k| out.narrow(0, k * n, n));
        let [a, b, c, d] = parts;
        Ok(GeneratedQuad::from_parts([a?, b?, c?, d?]))
    }

    /// Encodes a pair of image batches and generates the swap quad.
    pub fn swap_generate(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        modes: impl Into<SwapModes>,
        noise: QuadNoise,
        ctx: &Ctx,
    ) -> Result<SwapOutput> {
        let modes = modes.into();
        if x1.dims() != x2.dims() {
            return Err(Error::shape(format!("pair shapes differ: {:?} vs {:?}", x1.dims(), x2.dims())));
        }
        let n = self.check_images(x1)?;
        let both = Tensor::cat(&[x1, x2], 0)?;
        let mut features = self.backbone.shared(&both, modes.identity)?;
        let mut v_id = self.identity_from_features(&features, modes.identity)?;
        if modes.detach_identity {
            features = features.detach();
            v_id = v_id.detach();
        }
        let mode = modes.content;
        let d = self.config.latent_dim;
        let codes = match noise {
            QuadNoise::Independent => self.content_from_features(&features, mode, Noise::Sample, ctx)?,
            QuadNoise::Zero => self.content_from_features(&features, mode, Noise::Zero, ctx)?,
            QuadNoise::SharedSample => {
                let e = ctx.randn(&[n, d], x1)?;
                let e = Tensor::cat(&[&e, &e], 0)?;
                self.content_from_features(&features, mode, Noise::Given(&e), ctx)?
            }
            QuadNoise::Shared(e) => {
                let e = Tensor::cat(&[&e, &e], 0)?;
                self.content_from_features(&features, mode, Noise::Given(&e), ctx)?
            }
            QuadNoise::Given(e1, e2) => {
                let e = Tensor::cat(&[&e1, &e2], 0)?;
                self.content_from_features(&features, mode, Noise::Given(&e), ctx)?
            }
        };
        let half = |t: &Tensor, k: usize| t.narrow(0, k * n, n);
        let ids = [half(&v_id, 0)?, half(&v_id, 1)?];
        let content = [0, 1].map(|k| -> Result<ContentCodes> {
            Ok(ContentCodes {
                mu: half(&codes.mu, k)?,
                logvar: half(&codes.logvar, k)?,
                v_c: half(&codes.v_c, k)?,
            })
        });
        let [c1, c2] = content;
        let (c1, c2) = (c1?, c2?);
        let quad = self.generate_quad([&ids[0], &ids[1]], [&c1.v_c, &c2.v_c], modes.generator, ctx)?;
        Ok(SwapOutput {
            quad,
            v_id: ids,
            content: [c1, c2],
        })
    }

    /// Patch logits `[N, 1, h', w']` and their per-image mean `[N]`.
    pub fn discriminate(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_images(images)?;
        let patches = self.discriminator.patch_logits(images)?;
        let global = global_score(&patches)?;
        Ok((patches, global))
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        self.discriminator.patch_grid()
    }
}

/// Spatial mean of a patch-logit map, `[N, 1, h, w] -> [N]`.
pub fn global_score(patches: &Tensor) -> Result<Tensor> {
    Ok(patches.flatten_from(1)?.mean(D::Minus1)?)
}

/// `v_C = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, noise: Noise, ctx: &Ctx) -> Result<Tensor> {
    match noise {
        Noise::Zero => Ok(mu.clone()),
        Noise::Sample => {
            let eps = ctx.randn(mu.dims(), mu)?;
            Ok((mu + ((logvar * 0.5)?.exp()? * eps)?)?)
        }
        Noise::Given(eps) => {
            if eps.dims() != mu.dims() {
                return Err(Error::shape(format!("noise {:?} vs codes {:?}", eps.dims(), mu.dims())));
            }
            Ok((mu + ((logvar * 0.5)?.exp()? * eps.to_dtype(mu.dtype())?)?)?)
        }
    }
}
