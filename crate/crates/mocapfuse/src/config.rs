//! Runtime configuration: fusion thresholds, network shapes, and training
//! settings, all loadable from JSON with field-level defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::refine::RefineWeights;
use crate::Result;

pub use crate::nn::TrainConfig;

/// Network shapes shared by the recurrent estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden_size: usize,
    pub layer_count: usize,
    /// Hidden width of the state initializer.
    pub initializer_hidden: usize,
    /// Base seed for weight initialization; each network offsets it.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_size: 64,
            layer_count: 2,
            initializer_hidden: 128,
            seed: 42,
        }
    }
}

/// Hidden-state feedback gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub enabled: bool,
    /// Mean confidence at or above which the pose feedback may fire.
    pub pose_sigma: f64,
    /// Frames between periodic pose re-initializations while reliable.
    pub reliable_interval: usize,
    /// Fire the pose feedback on every reliable frame instead of only on
    /// unreliable-to-reliable transitions and the periodic interval.
    pub continuous: bool,
    /// Mean confidence below which the translation feedback replays the
    /// translation network on synthesized keypoints.
    pub translation_sigma: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            enabled: true,
            pose_sigma: 0.8,
            reliable_interval: 30,
            continuous: false,
            translation_sigma: 0.7,
        }
    }
}

/// Fusion thresholds and translation dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Mean confidence below which the blend ignores the camera estimate.
    pub sigma_lower: f64,
    /// Mean confidence at or above which the blend ignores the inertial
    /// estimate.
    pub sigma_upper: f64,
    pub contact_threshold: f64,
    /// Complementary-filter gain multiplied by the mean confidence.
    pub alpha_gain: f64,
    /// Scale the velocity increment by `1 - alpha` as well.
    pub scale_velocity_by_alpha: bool,
    /// Camera-frame translation assumed when the first frame has no usable
    /// keypoints.
    pub default_translation: [f64; 3],
    /// Downward acceleration applied while airborne, m/s^2.
    pub gravity_rate: f64,
    /// Airborne speed ceiling, m/s.
    pub terminal_velocity: f64,
    pub refine_enabled: bool,
    pub feedback: FeedbackConfig,
    pub refine: RefineWeights,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            sigma_lower: 0.7,
            sigma_upper: 0.8,
            contact_threshold: 0.7,
            alpha_gain: 0.05,
            scale_velocity_by_alpha: true,
            default_translation: [0.0, 0.0, 3.0],
            gravity_rate: 0.3,
            terminal_velocity: 1.0,
            refine_enabled: true,
            feedback: FeedbackConfig::default(),
            refine: RefineWeights::default(),
        }
    }
}

/// Top-level configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub fusion: FusionConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
