use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{DomainGap, SplitCase, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, SgdConfig};
use crate::wavelet::WaveletKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rates to zero at the last iteration.
    Cosine,
}

impl LrSchedule {
    /// Multiplier applied during step `iteration` (0-based) of `total`.
    pub fn factor(self, iteration: u64, total: u64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine if total == 0 => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * iteration as f64 / total as f64).cos()),
        }
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// `<root>/<domain>/<category>/<files>`; without a manifest file the
    /// ten-class SAR layout at the model's image size is assumed.
    Directory { root: PathBuf, manifest: Option<PathBuf> },
    Synthetic(SyntheticSpec),
}

/// Every field is required in config files; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the source image's own detail sub-bands in the wavelet mix.
    pub alpha: f64,
    /// Pseudo-label confidence threshold.
    pub sigma: f64,
    /// RBF bandwidth of the similarity matrices.
    pub beta_sq: f64,
    pub lambda_pta: f64,
    pub lambda_cona: f64,
    pub lambda_msr: f64,
    /// Samples per stream (source, labeled target, unlabeled target) per step.
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_extractor: f64,
    pub lr_classifier: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    /// Maximum entries per category in the augmentation pools.
    pub pool_capacity: usize,
    pub seed: u64,
    /// Evaluation and checkpoint cadence in iterations; 0 disables both
    /// except at the end of training.
    pub eval_every: u64,
    /// Mix source detail bands with pool partners before the supervised loss.
    pub pwtda: bool,
    /// Add confident unlabeled weak views to the pools.
    pub pool_insertion: bool,
    pub wavelet: WaveletKind,
    pub precision: Precision,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub data: DataSource,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            sigma: 0.95,
            beta_sq: 0.5,
            lambda_pta: 0.1,
            lambda_cona: 1.0,
            lambda_msr: 1.0,
            batch_size: 24,
            iterations: 5000,
            lr_extractor: 0.01,
            lr_classifier: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            lr_schedule: LrSchedule::Constant,
            pool_capacity: 64,
            seed: 0,
            eval_every: 250,
            pwtda: true,
            pool_insertion: true,
            wavelet: WaveletKind::Haar,
            precision: Precision::F32,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            data: DataSource::Directory { root: PathBuf::from("data/SAMPLE"), manifest: None },
            split: SplitSpec { k_shot: 1, case: SplitCase::CaseI, seed: 0, test_fraction: None },
        }
    }
}

impl TrainConfig {
    /// Small synthetic task; one run takes one to two minutes on one core.
    pub fn toy() -> Self {
        Self {
            batch_size: 16,
            iterations: 1000,
            lr_extractor: 0.03,
            lr_classifier: 0.03,
            lr_schedule: LrSchedule::Cosine,
            pool_capacity: 32,
            eval_every: 0,
            precision: Precision::F32,
            model: ModelConfig { channels: vec![4, 8, 16], num_classes: 4, ..ModelConfig::default() },
            data: DataSource::Synthetic(SyntheticSpec {
                num_categories: 4,
                images_per_category: 50,
                image_size: 64,
                gap: DomainGap::default(),
                seed: 0,
            }),
            split: SplitSpec { k_shot: 1, case: SplitCase::Custom, seed: 0, test_fraction: Some(0.5) },
            ..Self::default()
        }
    }

    /// Only labeled source and target data: no alignment or consistency
    /// terms, no wavelet mixing, nothing ever accepted into the pools.
    pub fn source_plus_target(mut self) -> Self {
        self.lambda_pta = 0.0;
        self.lambda_cona = 0.0;
        self.sigma = 1.01;
        self.pool_insertion = false;
        self.pwtda = false;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_pta", self.lambda_pta), ("lambda_cona", self.lambda_cona), ("lambda_msr", self.lambda_msr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma = {} must be finite and >= 0", self.sigma)));
        }
        if !(self.beta_sq > 0.0) {
            return Err(Error::Config(format!("beta_sq = {} must be positive", self.beta_sq)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.pool_capacity < self.split.k_shot {
            return Err(Error::Config(format!(
                "pool_capacity {} is below k_shot {}",
                self.pool_capacity, self.split.k_shot
            )));
        }
        for (name, v) in [
            ("lr_extractor", self.lr_extractor),
            ("lr_classifier", self.lr_classifier),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        self.model.validate()?;
        self.augment.validate_for(self.model.image_size, self.model.image_size).map_err(|e| e.context("augment"))?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.image_size != self.model.image_size || spec.num_categories != self.model.num_classes {
                return Err(Error::Config(format!(
                    "synthetic data ({} classes at {}px) does not match the model ({} classes at {}px)",
                    spec.num_categories, spec.image_size, self.model.num_classes, self.model.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_pta: self.lambda_pta, lambda_cona: self.lambda_cona, lambda_msr: self.lambda_msr }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr_extractor: self.lr_extractor,
            lr_classifier: self.lr_classifier,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
        }
    }

    /// Whether the unlabeled stream contributes anything this run.
    pub fn uses_unlabeled(&self) -> bool {
        self.lambda_cona > 0.0 || (self.pool_insertion && self.sigma <= 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        for cfg in [TrainConfig::default(), TrainConfig::toy(), TrainConfig::toy().source_plus_target()] {
            cfg.validate().unwrap();
            assert_eq!(TrainConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
        }
        let mut bad = TrainConfig::default();
        bad.lambda_msr = -1.0;
        assert!(bad.validate().unwrap_err().to_string().contains("lambda_msr"));
    }

    #[test]
    fn missing_and_unknown_fields_are_named() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json_pretty()).unwrap();
        v.as_object_mut().unwrap().remove("beta_sq");
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("beta_sq"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json_pretty()).unwrap();
        v["model"].as_object_mut().unwrap().insert("depth".into(), 3.into());
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("model") && err.contains("depth"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&TrainConfig::default().to_json_pretty()).unwrap();
        v["model"]["channels"] = "wide".into();
        let err = TrainConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("model.channels"), "{err}");
    }
}
