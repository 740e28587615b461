use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named parameters plus Adam state. Iteration order is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n = value.numel();
        self.moments.insert(
            name.clone(),
            Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            },
        );
        self.params.insert(name, value.with_requires_grad(true));
        Ok(())
    }

    /// Replace the value of an existing parameter (shape must match).
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value.with_requires_grad(true);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Merge every parameter of `other` under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for (name, value) in other.params {
            self.insert(format!("{prefix}.{name}"), value)?;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.params {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// One bias-corrected Adam update over every parameter.
    ///
    /// `grads` must hold an entry for each parameter; entries for names that
    /// are not parameters are rejected too.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for name in self.params.keys() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let p = &self.params[name];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        if let Some(extra) = grads.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            let m = self.moments.get_mut(name).expect("moments track params");
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                m.first[i] = cfg.beta1 * m.first[i] + (1.0 - cfg.beta1) * g[i];
                m.second[i] = cfg.beta2 * m.second[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                *v -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Adam restricted to the parameters present in `grads`.
    pub fn adam_step_subset(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        let mut sub = BTreeMap::new();
        for name in self.params.keys() {
            let g = match grads.get(name) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.params[name].shape().to_vec()),
            };
            sub.insert(name.clone(), g);
        }
        self.adam_step(&sub, cfg)
    }
}
