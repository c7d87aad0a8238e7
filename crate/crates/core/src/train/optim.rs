//! Optimizers over named [`Var`]s with an all-or-nothing finiteness guard.

use candle::backprop::GradStore;
use candle::{Tensor, Var};

use super::config::AdamParams;
use crate::{Error, Result};

/// A first-order optimizer over a fixed set of variables.
pub trait Optimizer {
    /// Applies one update from `grads`. Variables without a gradient are left
    /// untouched. If any updated value would be non-finite nothing is written.
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()>;

    fn names(&self) -> Vec<&str>;
}

struct Slot {
    name: String,
    var: Var,
    first: Option<Tensor>,
    second: Option<Tensor>,
    second_max: Option<Tensor>,
    steps: i32,
}

impl Slot {
    fn new((name, var): (String, Var)) -> Self {
        Self {
            name,
            var,
            first: None,
            second: None,
            second_max: None,
            steps: 0,
        }
    }
}

fn non_finite(t: &Tensor) -> Result<bool> {
    let s = t.sum_all()?.to_dtype(candle::DType::F64)?.to_scalar::<f64>()?;
    Ok(!s.is_finite())
}

/// Writes all updates or none of them.
fn commit(slots: &[Slot], updates: Vec<(usize, Tensor)>) -> Result<()> {
    for (i, value) in &updates {
        if non_finite(value)? {
            return Err(Error::NonFinite(format!(
                "update of `{}` produced NaN or infinity; aborting before any parameter is written",
                slots[*i].name
            )));
        }
    }
    for (i, value) in updates {
        slots[i].var.set(&value)?;
    }
    Ok(())
}

fn gradient(grads: &GradStore, slot: &Slot, weight_decay: f64) -> Result<Option<Tensor>> {
    let Some(g) = grads.get(slot.var.as_tensor()) else {
        return Ok(None);
    };
    // gradients carry the backward graph; keeping them in optimizer state would pin it
    let g = g.detach();
    if weight_decay > 0.0 {
        return Ok(Some((g + (slot.var.as_tensor().detach() * weight_decay)?)?));
    }
    Ok(Some(g))
}

/// Adam, optionally with the AMSGrad running maximum of the second moment.
pub struct Adam {
    slots: Vec<Slot>,
    params: AdamParams,
    amsgrad: bool,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, params: AdamParams) -> Self {
        Self {
            slots: vars.into_iter().map(Slot::new).collect(),
            params,
            amsgrad: false,
        }
    }

    pub fn amsgrad(vars: Vec<(String, Var)>, params: AdamParams) -> Self {
        Self {
            amsgrad: true,
            ..Self::new(vars, params)
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let AdamParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        let mut updates = Vec::new();
        let mut states = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            let Some(g) = gradient(grads, slot, weight_decay)? else {
                continue;
            };
            let m = match &slot.first {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match &slot.second {
                Some(v) => ((v * beta2)? + (&g2 * (1.0 - beta2))?)?,
                None => (&g2 * (1.0 - beta2))?,
            };
            let v_max = if self.amsgrad {
                Some(match &slot.second_max {
                    Some(prev) => prev.maximum(&v)?,
                    None => v.clone(),
                })
            } else {
                None
            };
            let t = slot.steps + 1;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let denom = ((v_max.as_ref().unwrap_or(&v).sqrt()? / bc2.sqrt())? + eps)?;
            let delta = ((&m / &denom)? * (lr / bc1))?;
            updates.push((i, (slot.var.as_tensor().detach() - delta)?));
            states.push((i, m, v, v_max));
        }
        commit(&self.slots, updates)?;
        for (i, m, v, v_max) in states {
            let slot = &mut self.slots[i];
            slot.first = Some(m);
            slot.second = Some(v);
            slot.second_max = v_max;
            slot.steps += 1;
        }
        Ok(())
    }

    fn names(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.name.as_str()).collect()
    }
}

/// Stochastic gradient descent with classical momentum.
pub struct Sgd {
    slots: Vec<Slot>,
    momentum: f64,
}

impl Sgd {
    pub fn new(vars: Vec<(String, Var)>, momentum: f64) -> Self {
        Self {
            slots: vars.into_iter().map(Slot::new).collect(),
            momentum,
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let mut updates = Vec::new();
        let mut states = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            let Some(g) = gradient(grads, slot, 0.0)? else {
                continue;
            };
            let buf = match &slot.first {
                Some(b) if self.momentum > 0.0 => ((b * self.momentum)? + &g)?,
                _ => g,
            };
            updates.push((i, (slot.var.as_tensor().detach() - (&buf * lr)?)?));
            states.push((i, buf));
        }
        commit(&self.slots, updates)?;
        for (i, buf) in states {
            self.slots[i].first = Some(buf);
            self.slots[i].steps += 1;
        }
        Ok(())
    }

    fn names(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.name.as_str()).collect()
    }
}
