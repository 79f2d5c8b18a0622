//! Run configuration: one TOML file covering basis, scene, training and
//! metric settings. Unknown keys are rejected so typos fail loudly, and
//! the resolved config has a stable hash that every run-log records.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::fnv1a64;
use crate::pipeline::{ModelArch, TrainConfig};
use crate::promp::BasisConfig;
use crate::scene::SceneGenConfig;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSection {
    pub n_bas: usize,
    pub n_steps: usize,
    /// Defaults to the region-covering `1/(2·n_bas²)` when absent.
    pub bandwidth: Option<f64>,
    pub ridge_lambda: f64,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self {
            n_bas: 8,
            n_steps: 100,
            bandwidth: None,
            ridge_lambda: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub image_h: usize,
    pub image_w: usize,
    pub n_configs: usize,
    pub n_targets: usize,
    pub n_repeats: usize,
    pub n_distractors: usize,
    pub duration: f64,
    pub sigma_end: f64,
    pub sigma_mid: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let g = SceneGenConfig::default();
        Self {
            image_h: g.image_h,
            image_w: g.image_w,
            n_configs: g.n_configs,
            n_targets: g.n_targets,
            n_repeats: g.n_repeats,
            n_distractors: g.n_distractors,
            duration: g.duration,
            sigma_end: g.sigma_end,
            sigma_mid: g.sigma_mid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_stage3: f64,
    pub kl_weight: f64,
    pub shrinkage: f64,
    pub obs_noise: f64,
    pub eps_loss: f64,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub diag_only: bool,
    pub cov_floor: f64,
    pub leaky_slope: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            alpha: t.alpha,
            epochs_stage1: t.epochs_stage1,
            epochs_stage2: t.epochs_stage2,
            epochs_stage3: t.epochs_stage3,
            batch_size: t.batch_size,
            lr_stage1: t.lr_stage1,
            lr_stage2: t.lr_stage2,
            lr_stage3: t.lr_stage3,
            kl_weight: t.kl_weight,
            shrinkage: t.shrinkage,
            obs_noise: t.obs_noise,
            eps_loss: t.eps_loss,
            latent_dim: 256,
            encoder_hidden: vec![1024, 512],
            head_hidden: vec![128, 64, 32],
            diag_only: false,
            cov_floor: 1e-6,
            leaky_slope: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSection {
    /// Monte-Carlo sample count for variance consistency checks.
    pub consistency_samples: usize,
    /// Offset (in standard deviations) for the final-pose table rows.
    pub table_sigma: f64,
    /// Offset used for the sampled-trajectory error bars.
    pub band_sigma: f64,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            consistency_samples: 100_000,
            table_sigma: 3.0,
            band_sigma: 2.0,
        }
    }
}

/// The resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub basis: BasisSection,
    pub scene: SceneSection,
    pub train: TrainSection,
    pub metric: MetricSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.basis_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scene_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model_arch()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.metric.consistency_samples < 2 {
            return Err(ConfigError::Invalid(
                "consistency_samples must be at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn basis_config(&self) -> BasisConfig {
        let mut cfg = BasisConfig::new(self.basis.n_bas, self.basis.n_steps);
        if let Some(h) = self.basis.bandwidth {
            cfg.bandwidth = h;
        }
        cfg.ridge_lambda = self.basis.ridge_lambda;
        cfg
    }

    pub fn scene_config(&self) -> SceneGenConfig {
        SceneGenConfig {
            image_h: self.scene.image_h,
            image_w: self.scene.image_w,
            n_distractors: self.scene.n_distractors,
            n_configs: self.scene.n_configs,
            n_targets: self.scene.n_targets,
            n_repeats: self.scene.n_repeats,
            n_steps: self.basis.n_steps,
            duration: self.scene.duration,
            sigma_end: self.scene.sigma_end,
            sigma_mid: self.scene.sigma_mid,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.train.alpha,
            epochs_stage1: self.train.epochs_stage1,
            epochs_stage2: self.train.epochs_stage2,
            epochs_stage3: self.train.epochs_stage3,
            batch_size: self.train.batch_size,
            lr_stage1: self.train.lr_stage1,
            lr_stage2: self.train.lr_stage2,
            lr_stage3: self.train.lr_stage3,
            kl_weight: self.train.kl_weight,
            shrinkage: self.train.shrinkage,
            obs_noise: self.train.obs_noise,
            eps_loss: self.train.eps_loss,
            seed: self.seed,
        }
    }

    pub fn model_arch(&self) -> ModelArch {
        ModelArch {
            image_h: self.scene.image_h,
            image_w: self.scene.image_w,
            latent_dim: self.train.latent_dim,
            encoder_hidden: self.train.encoder_hidden.clone(),
            head_hidden: self.train.head_hidden.clone(),
            n_bas: self.basis.n_bas,
            n_joints: crate::scene::JOINT_DIMS,
            n_steps: self.basis.n_steps,
            diag_only: self.train.diag_only,
            cov_floor: self.train.cov_floor,
            leaky_slope: self.train.leaky_slope,
        }
    }

    /// Canonical TOML dump of the resolved configuration.
    pub fn canonical_dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable 16-hex-digit hash of the resolved configuration.
    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_dump().as_bytes()))
    }
}
