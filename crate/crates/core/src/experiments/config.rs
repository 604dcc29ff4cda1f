//! Master configuration: one JSON file drives the whole benchmark. Every
//! field has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dwp::VAEConfig;
use crate::error::{Error, Result};
use crate::harvest::GroupingMode;
use crate::segnet::unet::UNetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MasterConfig {
    /// Master seed; every stage derives labeled substreams from it.
    pub seed: u64,
    pub dims: [usize; 3],
    pub source_volumes: usize,
    pub target_volumes: usize,
    pub test_size: usize,
    pub train_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub unet: UNetConfig,
    pub source_epochs: usize,
    pub target_epochs: usize,
    pub lr: f64,
    pub lambda_dice: f64,
    pub snapshot_burn_in: usize,
    pub snapshot_every: usize,
    pub grouping: GroupingMode,
    pub vae: VAEConfig,
    pub lr_theta: f64,
    pub lr_psi: f64,
    pub mc_samples: usize,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            seed: 1,
            dims: [32, 32, 32],
            source_volumes: 40,
            target_volumes: 70,
            test_size: 50,
            train_sizes: vec![5, 10, 15, 20],
            seeds: vec![1, 2, 3],
            unet: UNetConfig::default(),
            source_epochs: 60,
            target_epochs: 50,
            lr: 1e-3,
            lambda_dice: 1.0,
            snapshot_burn_in: 20,
            snapshot_every: 10,
            grouping: GroupingMode::Shared,
            vae: VAEConfig::default(),
            lr_theta: 1e-3,
            lr_psi: 1e-3,
            mc_samples: 1,
        }
    }
}

impl MasterConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.vae.validate()?;
        if self.train_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("train_sizes and seeds must be nonempty".into()));
        }
        for &ts in &self.train_sizes {
            if ![5, 10, 15, 20].contains(&ts) {
                return Err(Error::Config(format!(
                    "train_size {ts} not in {{5, 10, 15, 20}}"
                )));
            }
        }
        let div = self.unet.divisibility();
        for &d in &self.dims {
            if d < 16 || d % div != 0 {
                return Err(Error::Config(format!(
                    "dims {:?}: every axis must be >= 16 and divisible by {div}",
                    self.dims
                )));
            }
        }
        let max_train = *self.train_sizes.iter().max().unwrap();
        if self.target_volumes < max_train + self.test_size {
            return Err(Error::Config(format!(
                "target_volumes {} cannot cover train {} + test {}",
                self.target_volumes, max_train, self.test_size
            )));
        }
        if self.source_epochs == 0 || self.target_epochs == 0 {
            return Err(Error::Config("epoch counts must be >= 1".into()));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be >= 1".into()));
        }
        if self.snapshot_burn_in >= self.source_epochs {
            return Err(Error::Config(format!(
                "snapshot_burn_in {} must be below source_epochs {}",
                self.snapshot_burn_in, self.source_epochs
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Read and validate a config file; missing keys take defaults, unknown keys
/// are rejected.
pub fn load_config(path: &Path) -> Result<MasterConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: MasterConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
