//! Flat training configuration, its TOML form and digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::geometry::NoiseConfig;
use crate::losses::LossWeights;
use crate::matching::MatchWeights;
use crate::model::ModelConfig;

pub const SEED_ENV: &str = "DN_SEED";

/// Every knob of a run. Keys absent from a config file take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// 0-based epoch at which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub dn_groups: usize,
    pub attention_mask: bool,
    /// Train without touching the denoising code path at all.
    pub baseline: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    /// Training seed: initialization, shuffling and noise.
    pub seed: u64,
    /// Dataset seed, independent of `seed`.
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub max_objects: usize,
    pub n_classes: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub queries: usize,
    pub grid: usize,
    pub match_class: f64,
    pub match_l1: f64,
    pub match_giou: f64,
    pub loss_class: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub loss_dn: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let d = DatasetConfig::default();
        let n = NoiseConfig::default();
        let mw = MatchWeights::default();
        let lw = LossWeights::default();
        Self {
            epochs: 12,
            lr: 1e-4,
            lr_drop_epoch: 10,
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            batch_size: 16,
            grad_clip: 0.1,
            dn_groups: 5,
            attention_mask: true,
            baseline: false,
            lambda1: n.lambda1,
            lambda2: n.lambda2,
            gamma: n.gamma,
            seed: 0,
            data_seed: d.seed,
            n_train: d.n_train,
            n_val: d.n_val,
            max_objects: d.max_objects,
            n_classes: m.n_classes,
            d_model: m.d_model,
            ffn_dim: m.ffn_dim,
            layers: m.layers,
            queries: m.queries,
            grid: m.grid,
            match_class: mw.class,
            match_l1: mw.l1,
            match_giou: mw.giou,
            loss_class: lw.class,
            loss_l1: lw.l1,
            loss_giou: lw.giou,
            loss_dn: lw.denoising,
            focal_alpha: lw.focal_alpha,
            focal_gamma: lw.focal_gamma,
        }
    }
}

impl TrainConfig {
    /// Defaults with the learning rate raised to 1e-3, which the synthetic
    /// 12-epoch comparisons use.
    pub fn desk_scale() -> Self {
        Self {
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn baseline(&self) -> Self {
        Self {
            baseline: true,
            dn_groups: 0,
            ..self.clone()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_classes: self.n_classes,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            layers: self.layers,
            queries: self.queries,
            grid: self.grid,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            n_classes: self.n_classes,
            max_objects: self.max_objects,
            grid: self.grid,
            feature_dim: self.d_model,
            seed: self.data_seed,
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gamma: self.gamma,
        }
    }

    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            class: self.match_class,
            l1: self.match_l1,
            giou: self.match_giou,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            class: self.loss_class,
            l1: self.loss_l1,
            giou: self.loss_giou,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
            denoising: self.loss_dn,
        }
    }

    /// Denoising groups actually used for training.
    pub fn effective_groups(&self) -> usize {
        if self.baseline {
            0
        } else {
            self.dn_groups
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.lr_drop_epoch > self.epochs {
            return bad(format!(
                "lr_drop_epoch {} beyond {} epochs",
                self.lr_drop_epoch, self.epochs
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad("lr_drop_factor must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if self.baseline && self.dn_groups != 0 {
            return bad("a baseline run has no denoising groups".into());
        }
        self.noise().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.dataset().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self, epoch)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Reads a config file; `DN_SEED`, when set, overrides its seed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        let mut cfg = Self::from_toml_str(&text)?;
        apply_seed_env(&mut cfg)?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }
}

pub fn apply_seed_env(cfg: &mut TrainConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
    }
    Ok(())
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Step schedule: `lr` before the drop epoch, `lr * factor` from it on.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= cfg.lr_drop_epoch {
        cfg.lr * cfg.lr_drop_factor
    } else {
        cfg.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 3), 1e-4);
        assert_eq!(lr_at(&cfg, 9), 1e-4);
        assert!((lr_at(&cfg, 10) - 1e-5).abs() < 1e-20);
        assert!((lr_at(&cfg, 11) - 1e-5).abs() < 1e-20);
        let flat = TrainConfig {
            lr_drop_factor: 1.0,
            ..cfg
        };
        assert!((0..12).all(|e| lr_at(&flat, e) == 1e-4));
    }

    #[test]
    fn toml_roundtrip_and_digest() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        let other = TrainConfig { seed: 1, ..cfg.clone() };
        assert_ne!(other.digest(), cfg.digest());
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = TrainConfig::from_toml_str("epochs = 11\ndn_groups = 1\n").unwrap();
        assert_eq!(cfg.epochs, 11);
        assert_eq!(cfg.dn_groups, 1);
        assert_eq!(cfg.lr, 1e-4);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(TrainConfig::from_toml_str("epoch = 3"), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml_str("lr = 0.0").is_err());
        assert!(TrainConfig::from_toml_str("lr = -1e-4").is_err());
        assert!(TrainConfig::from_toml_str("epochs = 4\nlr_drop_epoch = 5").is_err());
        assert!(TrainConfig::from_toml_str("lambda1 = 1.5").is_err());
        assert!(TrainConfig::from_toml_str("baseline = true").is_err());
        assert!(TrainConfig::from_toml_str("baseline = true\ndn_groups = 0").is_ok());
        assert!(TrainConfig::from_toml_str("d_model = 12").is_err());
        assert!(TrainConfig::from_toml_str("[section]\nx = 1").is_err());
    }

    #[test]
    fn baseline_has_no_groups() {
        let b = TrainConfig::default().baseline();
        assert!(b.baseline && b.effective_groups() == 0);
        b.validate().unwrap();
    }
}
