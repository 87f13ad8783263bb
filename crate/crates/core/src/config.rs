//! Experiment configuration: one TOML document describing an entire run —
//! encoder, data sources, attack and detection hyperparameters, seeds, and
//! output location — with schema validation and stable hashing.
//!
//! Every numeric default matches the library defaults of the corresponding
//! module, so an empty file is a complete (toy) configuration. Paths in the
//! file are resolved relative to the file's own directory at load time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::targeted::BackdoorConfig;
use crate::attack::untargeted::UntargetedConfig;
use crate::detect::InversionConfig;
use crate::encoder::EncoderDescriptor;
use crate::error::{Error, Result};
use crate::trigger::TriggerOptConfig;

/// Default L-infinity trigger budget (8/255).
pub const DEFAULT_EPSILON1: f64 = 8.0 / 255.0;

/// Data sources and sampling caps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of attacker-held (shadow) images.
    pub shadow_dir: PathBuf,
    /// Maximum number of shadow images to load.
    pub shadow_cap: usize,
    /// Held-out evaluation images. When absent, the loader draws
    /// `shadow_cap + test_cap` images from `shadow_dir` and splits them.
    pub test_dir: Option<PathBuf>,
    pub test_cap: usize,
    /// Shuffle/split seed for dataset assembly.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            shadow_dir: PathBuf::from("data/shadow"),
            shadow_cap: 500,
            test_dir: None,
            test_cap: 200,
            seed: 7,
        }
    }
}

/// Stage-1 trigger settings: the budget plus the optimizer loop. Fields
/// mirror [`TriggerOptConfig`] explicitly (serde's `flatten` cannot coexist
/// with `deny_unknown_fields`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerSection {
    pub epsilon1: f64,
    pub epochs: usize,
    pub initial_lr: f64,
    pub batch_size: usize,
}

impl Default for TriggerSection {
    fn default() -> Self {
        let opt = TriggerOptConfig::default();
        Self {
            epsilon1: DEFAULT_EPSILON1,
            epochs: opt.epochs,
            initial_lr: opt.initial_lr,
            batch_size: opt.batch_size,
        }
    }
}

impl TriggerSection {
    pub fn opt(&self) -> TriggerOptConfig {
        TriggerOptConfig {
            epochs: self.epochs,
            initial_lr: self.initial_lr,
            batch_size: self.batch_size,
        }
    }
}

/// Fine-tuning-defense simulation settings used by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { epochs: 3, lr: 1e-3, batch_size: 8 }
    }
}

/// The whole experiment, as parsed from one TOML document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment name; becomes the output subdirectory.
    pub name: String,
    /// Master seed for trigger optimization, training, and detection.
    pub seed: u64,
    /// Output root. When `None`, the CLI falls back to `$TROJVIS_HOME` or
    /// `./trojvis-runs`.
    pub output_dir: Option<PathBuf>,
    /// Target image path; required by targeted commands only.
    pub target_image: Option<PathBuf>,
    pub encoder: EncoderDescriptor,
    pub data: DataSection,
    pub trigger: TriggerSection,
    pub backdoor: BackdoorConfig,
    pub untargeted: UntargetedConfig,
    pub detect: InversionConfig,
    pub finetune: FinetuneSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".to_string(),
            seed: 0,
            output_dir: None,
            target_image: None,
            encoder: EncoderDescriptor::toy(0),
            data: DataSection::default(),
            trigger: TriggerSection::default(),
            backdoor: BackdoorConfig::default(),
            untargeted: UntargetedConfig::default(),
            detect: InversionConfig::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML string. Unknown keys are rejected; missing keys take
    /// defaults. No paths are resolved or checked here.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Load from a file, resolving every relative path in the document
    /// against the file's parent directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("cannot read config: {e}"),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Rebase every relative path in the config onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut self.data.shadow_dir);
        if let Some(t) = &mut self.data.test_dir {
            rebase(t);
        }
        if let Some(t) = &mut self.target_image {
            rebase(t);
        }
        if let Some(c) = &mut self.encoder.checkpoint {
            rebase(c);
        }
        if let Some(o) = &mut self.output_dir {
            rebase(o);
        }
    }

    /// Full schema validation: numeric ranges via each section's own
    /// validator, plus existence checks for every referenced input path.
    /// `need_target` is set by targeted commands.
    pub fn validate(&self, need_target: bool) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty path-safe string"));
        }
        if !(self.trigger.epsilon1 >= 0.0 && self.trigger.epsilon1 <= 1.0) {
            return Err(Error::config("trigger.epsilon1", "must lie in [0, 1]"));
        }
        self.trigger.opt().validate()?;
        self.backdoor.validate()?;
        self.untargeted.validate()?;
        self.detect.validate()?;
        if self.finetune.epochs > 0 && self.finetune.lr <= 0.0 {
            return Err(Error::config("finetune.lr", "must be > 0"));
        }
        if self.finetune.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be >= 1"));
        }
        if self.data.shadow_cap == 0 {
            return Err(Error::config("data.shadow_cap", "must be >= 1"));
        }
        if !self.data.shadow_dir.is_dir() {
            return Err(Error::config(
                "data.shadow_dir",
                format!("directory does not exist: {}", self.data.shadow_dir.display()),
            ));
        }
        if let Some(t) = &self.data.test_dir {
            if !t.is_dir() {
                return Err(Error::config(
                    "data.test_dir",
                    format!("directory does not exist: {}", t.display()),
                ));
            }
        }
        if let Some(c) = &self.encoder.checkpoint {
            if !c.is_file() {
                return Err(Error::config(
                    "encoder.checkpoint",
                    format!("file does not exist: {}", c.display()),
                ));
            }
        }
        match &self.target_image {
            Some(t) if !t.is_file() => {
                return Err(Error::config(
                    "target_image",
                    format!("file does not exist: {}", t.display()),
                ));
            }
            None if need_target => {
                return Err(Error::config(
                    "target_image",
                    "required for targeted commands but not set",
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Serialize back to TOML (for the per-experiment config copy).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Stable hash of the fully-resolved configuration.
    pub fn hash(&self) -> String {
        config_hash(self).expect("config serializes")
    }
}

/// SHA-256 over the canonical JSON serialization of any config-like value.
/// Struct fields serialize in declaration order, so equal values hash
/// equally across runs and processes.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_a_complete_default_config() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.trigger.epsilon1, 8.0 / 255.0);
        assert_eq!(cfg.backdoor.lambda1, 1.0);
        assert_eq!(cfg.backdoor.lambda2, 1.0);
        assert_eq!(cfg.backdoor.batch_size, 4);
        assert_eq!(cfg.backdoor.epochs, 30);
        assert_eq!(cfg.trigger.epochs, 10);
        assert_eq!(cfg.trigger.initial_lr, 1e-3);
        assert_eq!(cfg.detect.threshold, 0.1);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn partial_sections_override_only_named_fields() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 9\n[backdoor]\nlambda2 = 0.5\n[trigger]\nepsilon1 = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.backdoor.lambda2, 0.5);
        assert_eq!(cfg.backdoor.lambda1, 1.0, "untouched fields keep defaults");
        assert_eq!(cfg.trigger.epsilon1, 0.1);
        assert_eq!(cfg.trigger.epochs, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[backdoor]\nlambda9 = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("nonsense = true\n").is_err());
    }

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[trigger]\nepsilon1 = 0.05\n").unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn validation_reports_the_failing_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.trigger.epsilon1 = 1.5;
        let err = cfg.validate(false).unwrap_err().to_string();
        assert!(err.contains("trigger.epsilon1"), "message was: {err}");

        let mut cfg = ExperimentConfig::default();
        cfg.backdoor.lambda1 = -1.0;
        assert!(cfg.validate(false).is_err());
    }

    #[test]
    fn missing_target_is_an_error_only_when_needed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.data.shadow_dir = dir.path().to_path_buf();
        assert!(cfg.validate(false).is_ok());
        let err = cfg.validate(true).unwrap_err().to_string();
        assert!(err.contains("target_image"), "message was: {err}");
    }

    #[test]
    fn relative_paths_resolve_against_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("imgs")).unwrap();
        std::fs::write(
            dir.path().join("exp.toml"),
            "[data]\nshadow_dir = \"imgs\"\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&dir.path().join("exp.toml")).unwrap();
        assert_eq!(cfg.data.shadow_dir, dir.path().join("imgs"));
        assert!(cfg.validate(false).is_ok());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = ExperimentConfig::from_toml("seed = 1\n").unwrap();
        let b = ExperimentConfig::from_toml("seed = 2\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::from_toml("seed = 1\n").unwrap().hash());
    }
}
