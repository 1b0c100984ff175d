//! Run configuration with validated defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Precision;

/// Every knob of a run. Absent JSON keys fall back to the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Frames per video.
    pub t: usize,
    /// Frames selected as visual inputs (and Gaussian mask count).
    pub k: usize,
    /// Embedding width of the frozen encoders.
    pub d_i: usize,
    /// Hidden width of the Gaussian generator.
    pub d_g: usize,
    /// Transformer encoder layers.
    pub layers: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Positional-table capacity; `t` may not exceed it.
    pub t_max: usize,
    /// Gaussian width.
    pub sigma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the center-regression loss.
    pub alpha1: f64,
    /// Weight of the contrastive loss.
    pub alpha2: f64,
    /// Same-video negative moments.
    pub n_intra: usize,
    /// Cross-video negative moments.
    pub n_inter: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Perturbation scale of the smoothed Top-K.
    pub eps_p: f64,
    /// Monte-Carlo draws of the smoothed Top-K.
    pub n_p: usize,
    /// "f32" for training, "f64" for gradient-check suites.
    pub precision: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t: 32,
            k: 4,
            d_i: 32,
            d_g: 256,
            layers: 2,
            heads: 4,
            t_max: 64,
            sigma: 0.2,
            tau: 0.1,
            alpha1: 0.1,
            alpha2: 0.1,
            n_intra: 16,
            n_inter: 32,
            lr: 1e-5,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            eps_p: 0.05,
            n_p: 200,
            precision: "f32".to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > self.t {
            return Err(Error::Validation(format!(
                "K must satisfy 1 <= K <= T, got K={} T={}",
                self.k, self.t
            )));
        }
        if self.n_intra > self.t - self.k {
            return Err(Error::Validation(format!(
                "N_intra={} exceeds T-K={}",
                self.n_intra,
                self.t - self.k
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Validation(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Validation(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Validation(format!(
                "alpha1 and alpha2 must be non-negative, got {} and {}",
                self.alpha1, self.alpha2
            )));
        }
        if self.t > self.t_max {
            return Err(Error::Validation(format!(
                "T={} exceeds the positional capacity T_max={}",
                self.t, self.t_max
            )));
        }
        if self.d_g % self.heads != 0 {
            return Err(Error::Validation(format!(
                "heads={} must divide D_G={}",
                self.heads, self.d_g
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.eps_p > 0.0) {
            return Err(Error::Validation(format!("eps_p must be > 0, got {}", self.eps_p)));
        }
        if self.n_p == 0 {
            return Err(Error::Validation("n_p must be at least 1".into()));
        }
        self.precision_mode()?;
        Ok(())
    }

    pub fn precision_mode(&self) -> Result<Precision> {
        match self.precision.as_str() {
            "f32" => Ok(Precision::P32),
            "f64" => Ok(Precision::P64),
            other => Err(Error::Validation(format!(
                "precision must be \"f32\" or \"f64\", got {other:?}"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let trimmed = text.trim();
        let cfg: RunConfig = if trimmed.is_empty() {
            RunConfig::default()
        } else {
            serde_json::from_str(trimmed)?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("config file {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    RunConfig::from_json(&text)
}
