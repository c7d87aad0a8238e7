use candle::Tensor;

use super::layers::{dropout, leaky_relu, BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, Linear, Mode, WeightInit};
use super::params::Scope;
use crate::data::{check_generator_divisibility, ImageSize, Normalization};
use crate::{Error, Result};

/// Generator hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorSpec {
    pub image_size: ImageSize,
    pub latent_dim: usize,
    pub blocks: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
}

struct UpBlock {
    deconv: ConvTranspose2d,
    bn: BatchNorm2d,
}

/// `(v_Id ⊕ v_C) -> linear -> map -> B x {deconv, BN, leaky ReLU, dropout} -> conv -> tanh`.
pub struct Generator {
    spec: GeneratorSpec,
    fusion: Linear,
    init_hw: (usize, usize),
    blocks: Vec<UpBlock>,
    to_rgb: Conv2d,
    // affine map from tanh's [-1, 1] onto the normalized pixel range
    out_scale: Tensor,
    out_shift: Tensor,
}

fn block_channels(base: usize, i: usize) -> usize {
    (base >> i.min(usize::BITS as usize - 1)).max(16)
}

impl Generator {
    pub fn new(scope: &Scope, spec: GeneratorSpec, norm: &Normalization) -> Result<Self> {
        check_generator_divisibility(spec.image_size, spec.blocks)?;
        if spec.base_channels == 0 || spec.latent_dim == 0 {
            return Err(Error::config("generator widths must be positive"));
        }
        let f = 1usize << spec.blocks;
        let init_hw = (spec.image_size.height / f, spec.image_size.width / f);
        let c0 = spec.base_channels;
        let fusion = Linear::new(
            &scope.pp("fusion"),
            2 * spec.latent_dim,
            c0 * init_hw.0 * init_hw.1,
            WeightInit::Gan,
        )?;
        let mut blocks = Vec::with_capacity(spec.blocks);
        for i in 0..spec.blocks {
            let s = scope.pp(format!("block{i}"));
            let (c_in, c_out) = (block_channels(c0, i), block_channels(c0, i + 1));
            blocks.push(UpBlock {
                deconv: ConvTranspose2d::new(&s.pp("deconv"), c_in, c_out, 4, 2, 1)?,
                bn: BatchNorm2d::new(&s.pp("bn"), c_out)?,
            });
        }
        let to_rgb = Conv2d::new(
            &scope.pp("to_rgb"),
            block_channels(c0, spec.blocks),
            3,
            3,
            1,
            1,
            true,
            WeightInit::Gan,
        )?;
        // y01 = (t + 1) / 2, out = (y01 - mean) / std
        let scale: Vec<f32> = norm.std.iter().map(|s| 0.5 / s).collect();
        let shift: Vec<f32> = (0..3).map(|c| (0.5 - norm.mean[c]) / norm.std[c]).collect();
        let dev = scope.device();
        Ok(Self {
            spec,
            fusion,
            init_hw,
            blocks,
            to_rgb,
            out_scale: Tensor::from_vec(scale, (1, 3, 1, 1), dev)?,
            out_shift: Tensor::from_vec(shift, (1, 3, 1, 1), dev)?,
        })
    }

    pub fn forward(&self, v_id: &Tensor, v_c: &Tensor, mode: Mode, ctx: &Ctx) -> Result<Tensor> {
        let (n, d) = v_id.dims2()?;
        if v_c.dims2()? != (n, d) || d != self.spec.latent_dim {
            return Err(Error::shape(format!(
                "generator expects two [N, {}] codes, got {:?} and {:?}",
                self.spec.latent_dim,
                v_id.dims(),
                v_c.dims()
            )));
        }
        let z = Tensor::cat(&[v_id, v_c], 1)?;
        let (h0, w0) = self.init_hw;
        let mut x = self
            .fusion
            .forward(&z)?
            .reshape((n, self.spec.base_channels, h0, w0))?;
        x = leaky_relu(&x, self.spec.leaky_slope)?;
        for b in &self.blocks {
            x = b.deconv.forward(&x)?;
            x = b.bn.forward(&x, mode)?;
            x = leaky_relu(&x, self.spec.leaky_slope)?;
            x = dropout(&x, self.spec.dropout, mode, ctx)?;
        }
        let t = self.to_rgb.forward(&x)?.tanh()?;
        Ok(t.broadcast_mul(&self.out_scale)?.broadcast_add(&self.out_shift)?)
    }

    /// Bounds of the output range per channel, `(low, high)`.
    pub fn output_range(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let s = self.out_scale.flatten_all()?.to_vec1::<f32>()?;
        let b = self.out_shift.flatten_all()?.to_vec1::<f32>()?;
        Ok((
            s.iter().zip(&b).map(|(s, b)| b - s).collect(),
            s.iter().zip(&b).map(|(s, b)| b + s).collect(),
        ))
    }
}

/// Discriminator hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorSpec {
    pub image_size: ImageSize,
    pub blocks: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

struct DownBlock {
    conv: Conv2d,
    norm: super::layers::InstanceNorm2d,
}

/// C x {strided conv, instance norm, leaky ReLU} followed by a 1-channel
/// patch-logit convolution; the global score is the mean patch logit.
pub struct Discriminator {
    spec: DiscriminatorSpec,
    blocks: Vec<DownBlock>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(scope: &Scope, spec: DiscriminatorSpec) -> Result<Self> {
        let f = 1usize
            .checked_shl(spec.blocks as u32)
            .ok_or_else(|| Error::config("too many discriminator blocks"))?;
        let size = spec.image_size;
        if size.height % f != 0 || size.width % f != 0 || (size.height / f) * (size.width / f) <= 1 {
            return Err(Error::config(format!(
                "{} discriminator blocks leave no patch grid for {size} images; \
                 the patch map must have more than one cell",
                spec.blocks
            )));
        }
        let mut blocks = Vec::with_capacity(spec.blocks);
        let mut c_in = 3;
        for i in 0..spec.blocks {
            let c_out = (spec.base_channels << i).min(512);
            let s = scope.pp(format!("block{i}"));
            blocks.push(DownBlock {
                conv: Conv2d::new(&s.pp("conv"), c_in, c_out, 4, 2, 1, false, WeightInit::Gan)?,
                norm: super::layers::InstanceNorm2d::new(&s.pp("norm"), c_out)?,
            });
            c_in = c_out;
        }
        let head = Conv2d::new(&scope.pp("patch"), c_in, 1, 3, 1, 1, true, WeightInit::Gan)?;
        Ok(Self { spec, blocks, head })
    }

    /// Patch logits `[N, 1, h', w']`.
    pub fn patch_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for b in &self.blocks {
            x = leaky_relu(&b.norm.forward(&b.conv.forward(&x)?)?, self.spec.leaky_slope)?;
        }
        self.head.forward(&x)
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        let f = 1usize << self.spec.blocks;
        (self.spec.image_size.height / f, self.spec.image_size.width / f)
    }
}
