//! Training, evaluation, checkpoints and ablation sweeps.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod train;

pub use config::{lr_at, TrainConfig};
pub use train::{evaluate, run_experiment, run_experiment_on, ExperimentResult, RunOptions, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Groups,
    Noise,
    Mask,
}

impl std::str::FromStr for Sweep {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "groups" => Ok(Self::Groups),
            "noise" => Ok(Self::Noise),
            "mask" => Ok(Self::Mask),
            other => Err(crate::error::Error::Config(format!(
                "unknown sweep {other:?}, expected groups, noise or mask"
            ))),
        }
    }
}

pub const GROUP_SWEEP: [usize; 3] = [0, 1, 5];
pub const NOISE_SWEEP: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Labelled variants of `base` for one sweep.
pub fn ablation_configs(base: &TrainConfig, sweep: Sweep) -> Vec<(String, TrainConfig)> {
    match sweep {
        Sweep::Groups => GROUP_SWEEP
            .iter()
            .map(|&p| {
                let cfg = if p == 0 {
                    base.baseline()
                } else {
                    TrainConfig {
                        dn_groups: p,
                        baseline: false,
                        ..base.clone()
                    }
                };
                (format!("groups_{p}"), cfg)
            })
            .collect(),
        Sweep::Noise => NOISE_SWEEP
            .iter()
            .map(|&l| {
                let cfg = TrainConfig {
                    lambda1: l,
                    lambda2: l,
                    ..base.clone()
                };
                (format!("lambda_{l:.1}"), cfg)
            })
            .collect(),
        Sweep::Mask => [true, false]
            .iter()
            .map(|&on| {
                let cfg = TrainConfig {
                    attention_mask: on,
                    ..base.clone()
                };
                (format!("mask_{}", if on { "on" } else { "off" }), cfg)
            })
            .collect(),
    }
}
