//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_FPR_LIMIT, DEFAULT_SMOOTHING_SIGMA};
use crate::mfen::JitterPolicy;
use crate::model::ModelConfig;
use crate::tensor::Sgd;

/// Perturbations applied to every train and test sample before a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSpec {
    /// Blend strength of another object's background; 0 disables.
    pub spurious_strength: f64,
    /// Amplitude of the added Perlin noise; 0 disables.
    pub noise_intensity: f64,
    pub seed: u64,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        Self {
            spurious_strength: 0.0,
            noise_intensity: 0.0,
            seed: 17,
        }
    }
}

impl InjectionSpec {
    pub fn is_identity(&self) -> bool {
        self.spurious_strength == 0.0 && self.noise_intensity == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset directory; empty means generate from `synth`.
    pub dataset_path: String,
    pub setting: String,
    pub seeds: Vec<u64>,
    pub base_epochs: usize,
    pub incr_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip per update; 0 disables it.
    pub grad_clip: f64,
    /// Clear optimizer momentum at the start of every step.
    pub reset_optimizer: bool,
    pub smoothing_sigma: f64,
    pub fpr_limit: f64,
    /// Heatmaps written per object at the final step (first seed only).
    pub heatmaps_per_object: usize,
    pub synth: SynthConfig,
    pub injection: InjectionSpec,
    pub jitter: JitterPolicy,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_path: String::new(),
            setting: "6-1 with 4 steps".into(),
            seeds: vec![0, 1, 2, 3],
            base_epochs: 60,
            incr_epochs: 40,
            batch_size: 8,
            lr: 1e-2,
            momentum: 0.9,
            grad_clip: 5.0,
            reset_optimizer: false,
            smoothing_sigma: DEFAULT_SMOOTHING_SIGMA,
            fpr_limit: DEFAULT_FPR_LIMIT,
            heatmaps_per_object: 2,
            synth: SynthConfig::default(),
            injection: InjectionSpec::default(),
            jitter: JitterPolicy::default(),
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Single-core sized preset: 32×32 images, narrow encoder, few epochs.
    pub fn compact() -> Self {
        Self {
            base_epochs: 30,
            incr_epochs: 20,
            synth: SynthConfig {
                per_object_train: 8,
                per_object_test: 12,
                image_hw: 32,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                channels: [4, 8, 16, 16],
                bottleneck: 4,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn optimizer(&self) -> Sgd {
        Sgd::new(self.lr, self.momentum).with_clip_norm((self.grad_clip > 0.0).then_some(self.grad_clip))
    }

    pub fn dataset_dir(&self) -> Option<PathBuf> {
        (!self.dataset_path.is_empty()).then(|| PathBuf::from(&self.dataset_path))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip {} must be finite and >= 0", self.grad_clip));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return bad(format!("fpr_limit {} outside (0, 1]", self.fpr_limit));
        }
        if !(self.smoothing_sigma >= 0.0) {
            return bad(format!("smoothing_sigma {} must be >= 0", self.smoothing_sigma));
        }
        if !(0.0..=1.0).contains(&self.injection.spurious_strength) {
            return bad("injection.spurious_strength outside [0, 1]".into());
        }
        if !(self.injection.noise_intensity >= 0.0) {
            return bad("injection.noise_intensity must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.model.dropout) {
            return bad("model.dropout outside [0, 1]".into());
        }
        let j = &self.jitter;
        if !(0.0..=1.0).contains(&j.probability)
            || !(0.0 <= j.alpha_min && j.alpha_min <= j.alpha_max)
            || !(0.0 < j.area_min && j.area_min <= j.area_max && j.area_max <= 1.0)
        {
            return bad(format!("invalid jitter policy {j:?}"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.model.lambdas, crate::ibfm::Lambdas { rgb: 1.0, depth: 1.0, fusion: 1.0, ib: 1.0 });
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("setting = \"10-0 with 0 step\"\n[model]\nuse_mamba = false\n").unwrap();
        assert_eq!(cfg.setting, "10-0 with 0 step");
        assert!(!cfg.model.use_mamba);
        assert_eq!(cfg.batch_size, 8);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("learning_rate = 0.1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("lr = -1.0"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("seeds = []"), Err(Error::Config(_))));
    }
}
