use std::collections::BTreeMap;
use std::sync::Mutex;

use candle::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Initialization rule for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f32),
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    Normal { std: f32 },
}

/// Whether the optimizer may touch a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics and other state updated outside the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

struct Inner {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter registry shared by every sub-network.
pub struct ParamStore {
    inner: Mutex<Inner>,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("len", &self.len()).finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            inner: Mutex::new(Inner {
                params: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        let mut inner = self.inner.lock().unwrap();
        if inner.params.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Const(c) => vec![c; n],
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f32).sqrt();
                let dist = Uniform::new_inclusive(-b, b).expect("valid bounds");
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0f32, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        inner.params.insert(name, Param { var: var.clone(), kind });
        Ok(var)
    }

    /// Trainable parameters whose name starts with one of `prefixes`, sorted by name.
    pub fn trainable(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .params
            .iter()
            .filter(|(n, p)| p.kind == ParamKind::Trainable && matches_prefix(n, prefixes))
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    /// Every registered tensor (buffers included), sorted by name.
    pub fn named(&self) -> Vec<(String, Param)> {
        self.inner
            .lock()
            .unwrap()
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().params.get(name).map(|p| p.var.clone())
    }

    /// SHA-256 over names and f32 values of every tensor (buffers included)
    /// under `prefixes`.
    pub fn checksum(&self, prefixes: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in self.named() {
            if !matches_prefix(&name, prefixes) {
                continue;
            }
            h.update(name.as_bytes());
            let v = p.var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// Overwrites tensors by name; every stored name must be present with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        for (name, p) in &inner.params {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::shape(format!(
                    "`{name}`: stored {:?}, model {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(p.var.dtype())?.to_device(&self.device)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !inner.params.contains_key(*k)) {
            return Err(Error::invalid(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

fn matches_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| {
        name.strip_prefix(p)
            .map_or(false, |rest| rest.is_empty() || rest.starts_with('.'))
    })
}

/// A dotted-name view into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self
            .store
            .insert(self.full(name), shape, init, ParamKind::Trainable)?
            .as_tensor()
            .clone())
    }

    pub fn buffer(&self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        self.store
            .insert(self.full(name), shape, Init::Const(value), ParamKind::Buffer)
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
