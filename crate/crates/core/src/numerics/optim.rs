//! Named parameter storage and the AdamW update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// One learnable tensor with its gradient buffer and Adam moments, all kept
/// at the parameter's extents.
struct ParamEntry {
    value: Tensor,
    grad: Vec<f64>,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
}

/// Parameters keyed by name. `BTreeMap` gives a deterministic update order,
/// which checkpointing and bitwise reproducibility rely on.
#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} already exists")));
        }
        let n = value.len();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: vec![0.0; n],
                moment1: vec![0.0; n],
                moment2: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    /// Replaces a parameter's value, keeping extents.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))?;
        if value.extents() != entry.value.extents() {
            return Err(Error::Shape(format!(
                "parameter {name} extents {:?} cannot change to {:?}",
                entry.value.extents(),
                value.extents()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(|e| e.grad.as_slice())
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn add_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))?;
        if grad.len() != entry.grad.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match parameter {name} ({})",
                grad.len(),
                entry.grad.len()
            )));
        }
        for (d, &g) in entry.grad.iter_mut().zip(grad) {
            *d += g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self, name: &str) -> Result<(&[f64], &[f64])> {
        self.entries
            .get(name)
            .map(|e| (e.moment1.as_slice(), e.moment2.as_slice()))
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub(crate) fn set_moments(&mut self, name: &str, m1: Vec<f64>, m2: Vec<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))?;
        if m1.len() != entry.grad.len() || m2.len() != entry.grad.len() {
            return Err(Error::Shape(format!("moment length mismatch for {name}")));
        }
        entry.moment1 = m1;
        entry.moment2 = m2;
        Ok(())
    }

    /// One decoupled-weight-decay Adam step over every parameter. Decay is
    /// applied as `theta -= lr * wd * theta` before the moment-based update,
    /// and the step counter increments by exactly one.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, entry) in self.entries.iter_mut() {
            let precision = entry.value.precision();
            let mut data = entry.value.data().to_vec();
            for i in 0..data.len() {
                data[i] -= cfg.lr * cfg.weight_decay * data[i];
                let g = entry.grad[i];
                entry.moment1[i] = cfg.beta1 * entry.moment1[i] + (1.0 - cfg.beta1) * g;
                entry.moment2[i] = cfg.beta2 * entry.moment2[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = entry.moment1[i] / bc1;
                let v_hat = entry.moment2[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            entry.value = Tensor::new(entry.value.extents().to_vec(), data, precision)
                .map_err(|e| Error::Numeric(format!("adamw update of {name}: {e}")))?;
        }
        Ok(())
    }
}
