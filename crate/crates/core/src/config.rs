//! Detector configuration, loadable from TOML. Every key is optional and
//! falls back to the recognizer defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{OrganizeCriteria, PairingCriteria};
use crate::codec::CrCategories;
use crate::imgproc::{AreaFilter, ThresholdParams};
use crate::quadfit::{FitThresholds, RefineParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialise configuration: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Images whose shorter side is at least this are halved before
    /// segmentation; 0 disables downsampling.
    pub downsample_min_side: usize,
    /// Run gradient edge refinement on the full-resolution image.
    pub refine: bool,
    pub threshold: ThresholdParams,
    pub area: AreaFilter,
    pub fit: FitThresholds,
    pub refinement: RefineParams,
    pub pairing: PairingCriteria,
    pub organize: OrganizeCriteria,
    pub categories: CrCategories,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            downsample_min_side: 1200,
            refine: true,
            threshold: ThresholdParams::default(),
            area: AreaFilter::default(),
            fit: FitThresholds::default(),
            refinement: RefineParams::default(),
            pairing: PairingCriteria::default(),
            organize: OrganizeCriteria::default(),
            categories: CrCategories::default(),
        }
    }
}

impl DetectorConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("fit.t_cost", self.fit.t_cost),
            ("fit.t_line", self.fit.t_line),
            ("fit.t_rac", self.fit.t_rac),
            ("pairing.theta", self.pairing.theta),
            ("pairing.alpha_gap", self.pairing.alpha_gap),
            ("pairing.alpha_len", self.pairing.alpha_len),
            ("pairing.alpha_s", self.pairing.alpha_s),
            ("organize.theta", self.organize.theta),
            ("organize.t_ver", self.organize.t_ver),
            ("organize.max_distance", self.organize.max_distance),
            ("organize.pitch_ratio", self.organize.pitch_ratio),
            ("organize.gap_factor", self.organize.gap_factor),
            ("refinement.search", self.refinement.search),
            ("categories.half_width", self.categories.half_width),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{key} must be positive, got {v}")));
            }
        }
        if self.threshold.tile == 0 {
            return Err(ConfigError::Invalid("threshold.tile must be positive".into()));
        }
        Ok(())
    }
}
