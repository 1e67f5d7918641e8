//! Run configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::p2z::{P2zArchitecture, Stage2Config};
use crate::spectral::{Component, Window};
use crate::vae::{Stage1Config, VaeArchitecture};
use crate::wake::WakeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Rate of the paired field/pressure training record, Hz.
    pub low_rate: f64,
    /// Rate of the pressure-only record, Hz.
    pub high_rate: f64,
    pub n_low: usize,
    pub n_high: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            low_rate: 1.0,
            high_rate: 64.0,
            n_low: 600,
            n_high: 1024,
        }
    }
}

/// Training hyperparameters. Epoch counts and the p2z batch are desk values;
/// the reference run used 2000 and 1000 epochs and p2z batches of 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_vae: f64,
    pub lr_p2z: f64,
    pub batch_vae: usize,
    pub batch_p2z: usize,
    pub beta_end: f64,
    pub epochs: usize,
    pub epos_p2z: usize,
    pub alpha_end: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_vae: 1e-4,
            lr_p2z: 1e-3,
            batch_vae: 4,
            batch_p2z: 8,
            beta_end: 0.001,
            epochs: 200,
            epos_p2z: 100,
            alpha_end: 0.01,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            epochs: self.epochs,
            batch_size: self.batch_vae,
            lr: self.lr_vae,
            beta_end: self.beta_end,
            val_fraction: self.val_fraction,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            epochs: self.epos_p2z,
            batch_size: self.batch_p2z,
            lr: self.lr_p2z,
            alpha_end: self.alpha_end,
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpodConfig {
    pub n_dft: usize,
    pub overlap: usize,
    pub n_modes: usize,
    pub window: Window,
    pub component: Component,
    /// Spectral peaks reported and exported as mode fields.
    pub n_peaks: usize,
}

impl Default for SpodConfig {
    fn default() -> Self {
        Self {
            n_dft: 256,
            overlap: 200,
            n_modes: 3,
            window: Window::Hamming,
            component: Component::U,
            n_peaks: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Lift-coefficient tolerance for `match-lift`.
    pub lift_tol: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { lift_tol: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/desk"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub wake: WakeConfig,
    pub vae: VaeArchitecture,
    pub p2z: P2zArchitecture,
    pub train: TrainConfig,
    pub spod: SpodConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}


fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "config".into());
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical serialisation; parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// The config with `paths` reset: what a run's results depend on. Stored
    /// in checkpoints and hashed into manifests, so the output location does
    /// not leak into artifacts.
    pub fn identity(&self) -> Self {
        Self {
            paths: PathsConfig::default(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical form of [`identity`](Self::identity), lowercase hex.
    pub fn hash(&self) -> String {
        hex_digest(self.identity().to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.wake.validate()?;
        self.vae.validate()?;
        self.p2z.validate()?;
        self.train.stage1().validate()?;
        self.train.stage2().validate()?;
        positive("data.low_rate", self.data.low_rate)?;
        positive("data.high_rate", self.data.high_rate)?;
        if self.data.low_rate >= self.data.high_rate {
            return Err(Error::config("data.low_rate", "must be below data.high_rate"));
        }
        if self.data.n_low < 10 {
            return Err(Error::config("data.n_low", "at least 10 training pairs are needed"));
        }
        if self.data.n_high == 0 {
            return Err(Error::config("data.n_high", "must be at least 1"));
        }
        if (self.vae.grid_h, self.vae.grid_w) != (self.wake.grid_h, self.wake.grid_w) {
            return Err(Error::config("vae.grid_h", "VAE grid must match wake grid"));
        }
        if self.vae.pressure_dim != self.wake.n_taps {
            return Err(Error::config("vae.pressure_dim", "must equal wake.n_taps"));
        }
        if self.p2z.input_dim != self.wake.n_taps {
            return Err(Error::config("p2z.input_dim", "must equal wake.n_taps"));
        }
        if self.p2z.output_dim != self.vae.latent_dim {
            return Err(Error::config("p2z.output_dim", "must equal vae.latent_dim"));
        }
        let s = &self.spod;
        if s.n_dft < 2 {
            return Err(Error::config("spod.n_dft", "must be at least 2"));
        }
        if s.overlap >= s.n_dft {
            return Err(Error::config("spod.overlap", "must be below spod.n_dft"));
        }
        if s.n_dft > self.data.n_high {
            return Err(Error::config("spod.n_dft", "longer than the high-rate record"));
        }
        if s.n_modes == 0 {
            return Err(Error::config("spod.n_modes", "must be at least 1"));
        }
        if self.eval.lift_tol.is_nan() || self.eval.lift_tol < 0.0 {
            return Err(Error::config("eval.lift_tol", "must be non-negative"));
        }
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
