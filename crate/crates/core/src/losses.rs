//! Training objectives.
//!
//! Every function is a pure map from tensors to a scalar tensor and works in
//! either f32 or f64, so gradients can be checked in double precision.

use candle::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::GeneratedQuad;
use crate::{Error, Result};

/// Weights of the target-domain objective plus identity-loss smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_adv: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 10.0,
            lambda_kl: 1e-4,
            lambda_adv: 1.0,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_kl", self.lambda_kl),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Which real image a generated `X_{i,j}` is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// `X_{i,j}` vs `X_j`, the image that supplied the content code.
    #[default]
    ContentSource,
    /// `X_{i,j}` vs `X_i`, the image that supplied the identity code.
    IdentitySource,
}

struct Softplus;

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle::Result<(CpuStorage, Shape)> {
        fn sp<T: num_like::Float>(x: T) -> T {
            // log(1 + e^x) without overflow
            if x > T::zero() {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        }
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(candle::cpu_backend::unary_map(s, layout, sp::<f32>)),
            CpuStorage::F64(s) => CpuStorage::F64(candle::cpu_backend::unary_map(s, layout, sp::<f64>)),
            other => {
                return Err(candle::Error::UnsupportedDTypeForOp(candle::backend::BackendStorage::dtype(other), "softplus"));
            }
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle::Result<Option<Tensor>> {
        Ok(Some(grad_res.mul(&candle_nn::ops::sigmoid(arg)?)?))
    }
}

mod num_like {
    pub trait Float: Copy + PartialOrd + std::ops::Add<Output = Self> + std::ops::Neg<Output = Self> {
        fn zero() -> Self;
        fn exp(self) -> Self;
        fn ln_1p(self) -> Self;
    }

    macro_rules! float {
        ($t:ty) => {
            impl Float for $t {
                fn zero() -> Self {
                    0.0
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn ln_1p(self) -> Self {
                    <$t>::ln_1p(self)
                }
            }
        };
    }
    float!(f32);
    float!(f64);
}

/// `log(1 + exp(x))`, stable for large `|x|`; derivative is `sigmoid(x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.apply_op1(Softplus)?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} contains NaN or infinity")));
    }
    Ok(())
}

/// Label-smoothed cross-entropy, averaged over the batch.
///
/// The target distribution puts `(1 - eps) + eps / K` on the true class and
/// `eps / K` elsewhere.
pub fn identity_loss(logits: &Tensor, labels: &[u32], eps: f64) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::invalid(format!("identity loss needs K >= 2 classes, got {k}")));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing {eps} outside [0, 1)")));
    }
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_slice(labels, (n, 1), logits.device())?;
    let nll = log_probs.gather(&idx, 1)?.squeeze(1)?.neg()?;
    let uniform = log_probs.mean(1)?.neg()?;
    let per_sample = ((nll * (1.0 - eps))? + (uniform * eps)?)?;
    Ok(per_sample.mean(0)?)
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`, summed over dimensions and
/// averaged over the batch.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mu.dims() != logvar.dims() {
        return Err(Error::shape(format!("mu {:?} vs logvar {:?}", mu.dims(), logvar.dims())));
    }
    ensure_finite(mu, "mu")?;
    ensure_finite(logvar, "logvar")?;
    let (n, _) = mu.dims2()?;
    let terms = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    let terms = (terms - 1.0)?;
    Ok((terms.sum_all()? * (0.5 / n as f64))?)
}

/// Discriminator objective in logit form: real patches pushed up, fake down.
///
/// Equals `mean softplus(-real) + mean softplus(fake)`, i.e. the binary
/// cross-entropy of each patch averaged over patches and batch.
pub fn adversarial_loss_d(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

/// Non-saturating generator objective `mean(-log D(fake))` in logit form.
pub fn adversarial_loss_g(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// Mean-L1 error of each generated image against its target, summed over the
/// four images of the quad.
pub fn reconstruction_loss(quad: &GeneratedQuad, x1: &Tensor, x2: &Tensor, mode: ReconTarget) -> Result<Tensor> {
    if x1.dims() != x2.dims() {
        return Err(Error::shape(format!("pair shapes {:?} vs {:?}", x1.dims(), x2.dims())));
    }
    let reals = [x1, x2];
    let mut total: Option<Tensor> = None;
    for i in 0..2 {
        for j in 0..2 {
            let generated = quad.get(i, j);
            let target = match mode {
                ReconTarget::ContentSource => reals[j],
                ReconTarget::IdentitySource => reals[i],
            };
            if generated.dims() != target.dims() {
                return Err(Error::shape(format!(
                    "generated {:?} vs target {:?}",
                    generated.dims(),
                    target.dims()
                )));
            }
            let term = (generated - target)?.abs()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("four terms"))
}

/// `lambda_rec * rec + lambda_kl * kl + lambda_adv * adv_g`.
pub fn target_loss(rec: &Tensor, kl: &Tensor, adv_g: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let rec = (rec * weights.lambda_rec)?;
    let kl = (kl * weights.lambda_kl)?;
    let adv = (adv_g * weights.lambda_adv)?;
    Ok(((rec + kl)? + adv)?)
}
