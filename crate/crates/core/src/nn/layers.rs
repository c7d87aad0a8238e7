use std::cell::RefCell;

use candle::{Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::conv::{conv2d, conv_transpose2d};
use super::params::{Init, Scope};
use crate::Result;

/// Train or evaluation behaviour of normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Randomness for dropout masks and content-code sampling.
///
/// Everything stochastic in a forward pass draws from here, so a seeded
/// context reproduces a run exactly.
pub struct Ctx {
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Standard-normal tensor of `shape`.
    pub fn randn(&self, shape: &[usize], like: &Tensor) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
    }

    fn keep_mask(&self, shape: &[usize], keep: f64, like: &Tensor) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let scale = (1.0 / keep) as f32;
        let v: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
    }

    pub fn rng(&self) -> std::cell::RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }
}

pub fn dropout(x: &Tensor, p: f64, mode: Mode, ctx: &Ctx) -> Result<Tensor> {
    if !mode.is_train() || p <= 0.0 {
        return Ok(x.clone());
    }
    let mask = ctx.keep_mask(x.dims(), 1.0 - p, x)?;
    Ok((x * mask)?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

fn channel_view(t: &Tensor) -> Result<Tensor> {
    Ok(t.reshape((1, t.dim(0)?, 1, 1))?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

/// Weight initialization for a conv or linear layer.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// PyTorch-style `U(±1/sqrt(fan_in))`.
    Default,
    /// `N(0, 0.02)`, the usual GAN initialization.
    Gan,
}

impl WeightInit {
    fn weight(self, fan_in: usize) -> Init {
        match self {
            WeightInit::Default => Init::FanInUniform { fan_in },
            WeightInit::Gan => Init::Normal { std: 0.02 },
        }
    }
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &Scope,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: WeightInit,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = scope.param("weight", &[c_out, c_in, kernel, kernel], init.weight(fan_in))?;
        let bias = if bias {
            Some(scope.param("bias", &[c_out], Init::FanInUniform { fan_in })?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&channel_view(b)?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    /// Bias-free; every use is followed by batch normalization.
    pub fn new(scope: &Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let weight = scope.param("weight", &[c_in, c_out, kernel, kernel], Init::Normal { std: 0.02 })?;
        Ok(Self {
            weight,
            stride,
            padding,
        })
    }

    /// Computed as a matrix product followed by col2im: each kernel tap's
    /// contribution is shifted into place with zero padding and summed. This
    /// is far faster on CPU than the direct kernel, forward and backward.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose2d(x, &self.weight, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, d_in: usize, d_out: usize, init: WeightInit) -> Result<Self> {
        let weight = scope.param("weight", &[d_out, d_in], init.weight(d_in))?;
        let bias = match init {
            WeightInit::Default => scope.param("bias", &[d_out], Init::FanInUniform { fan_in: d_in })?,
            WeightInit::Gan => scope.param("bias", &[d_out], Init::Const(0.0))?,
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over `(N, H, W)` with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[channels], Init::Const(1.0))?,
            bias: scope.param("bias", &[channels], Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", &[channels], 0.0)?,
            running_var: scope.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if mode.is_train() {
            let count = n * h * w;
            if count < 2 {
                return Err(crate::Error::shape(format!(
                    "batch norm in training mode needs more than one value per channel, got {:?}",
                    x.dims()
                )));
            }
            let flat = x.transpose(0, 1)?.reshape((c, count))?;
            let mean = flat.mean(1)?;
            let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
            let var = centered.sqr()?.mean(1)?;
            let unbiased = (var.detach() * (count as f64 / (count - 1) as f64))?;
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (&self.weight * inv_std)?;
        let shift = (&self.bias - (&mean * &scale)?)?;
        Ok(x.broadcast_mul(&channel_view(&scale)?)?
            .broadcast_add(&channel_view(&shift)?)?)
    }
}

/// Per-sample, per-channel normalization with an affine map.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl InstanceNorm2d {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[channels], Init::Const(1.0))?,
            bias: scope.param("bias", &[channels], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let flat = x.reshape((n, c, h * w))?;
        let mean = flat.mean_keepdim(2)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&channel_view(&self.weight)?)?
            .broadcast_add(&channel_view(&self.bias)?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}
