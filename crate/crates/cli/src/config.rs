//! Versioned JSON run configuration with dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use coordfuse::datamodel::{SyntheticConfig, DEFAULT_RATIOS};
use coordfuse::fusion::{BranchConfig, RegressorTrainConfig, Variant};
use coordfuse::fvtc::DEFAULT_MAX_DELAY;
use coordfuse::vqvae::{VqTrainConfig, VqvaeConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const DATA_ROOT_ENV: &str = "COORDFUSE_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FvtcSection {
    pub max_delay: usize,
    pub normalize: bool,
}

impl Default for FvtcSection {
    fn default() -> Self {
        Self {
            max_delay: DEFAULT_MAX_DELAY,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    /// Falls back to the run seed.
    pub seed: Option<u64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqvaeSection {
    pub model: VqvaeConfig,
    pub train: VqTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorSection {
    /// `input_dim` of each branch is taken from the data.
    pub speech: BranchConfig,
    pub artic: BranchConfig,
    pub head_hidden: Vec<usize>,
    pub cross_attention: bool,
    pub train: RegressorTrainConfig,
}

impl Default for RegressorSection {
    fn default() -> Self {
        Self {
            speech: BranchConfig::default(),
            artic: BranchConfig::default(),
            head_hidden: vec![32],
            cross_attention: false,
            train: RegressorTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub variants: Vec<Variant>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            variants: vec![Variant::FusionMha],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Base for relative input paths; `COORDFUSE_DATA_ROOT` or the working
    /// directory when unset.
    pub data_root: Option<PathBuf>,
    /// Parent of timestamped run directories.
    pub runs_root: PathBuf,
    pub synth: SyntheticConfig,
    pub fvtc: FvtcSection,
    pub split: SplitSection,
    pub vqvae: VqvaeSection,
    pub regressor: RegressorSection,
    pub pipeline: PipelineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data_root: None,
            runs_root: PathBuf::from("runs"),
            synth: SyntheticConfig::default(),
            fvtc: FvtcSection::default(),
            split: SplitSection::default(),
            vqvae: VqvaeSection::default(),
            regressor: RegressorSection::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.vqvae.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.vqvae.model.max_delay != self.fvtc.max_delay {
            return Err(CliError::Config(format!(
                "vqvae.model.D ({}) must equal fvtc.max_delay ({})",
                self.vqvae.model.max_delay, self.fvtc.max_delay
            )));
        }
        if self.pipeline.variants.is_empty() {
            return Err(CliError::Config("pipeline.variants is empty".into()));
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides; values parse as JSON, falling
    /// back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        Self::from_value(value)
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Absolute form of an input path, relative paths taken from the data root.
    pub fn resolve_input(&self, path: &Path) -> PathBuf {
        let p = if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.data_root().join(path)
        };
        absolute(&p)
    }
}

pub fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(CliError::Config(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown config key {key}")))?;
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let v = serde_json::json!({"version": 1, "bogus": 3});
        assert!(matches!(RunConfig::from_value(v), Err(CliError::Config(_))));
        let v = serde_json::json!({"version": 1, "fvtc": {"max_delay": 50, "extra": true}});
        assert!(RunConfig::from_value(v).is_err());
        assert!(RunConfig::default().with_overrides(&["fvtc.nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "seed=7".into(),
                "synth.n_subjects=5".into(),
                "pipeline.variants=[\"fusion-nomha\"]".into(),
            ])
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.synth.n_subjects, 5);
        assert_eq!(cfg.pipeline.variants, vec![Variant::FusionNomha]);
        assert_eq!(cfg.split_seed(), 7);
    }

    #[test]
    fn version_and_delay_checked() {
        let v = serde_json::json!({"version": 2});
        assert!(RunConfig::from_value(v).is_err());
        assert!(RunConfig::default().with_overrides(&["fvtc.max_delay=10".into()]).is_err());
        assert!(RunConfig::default()
            .with_overrides(&["fvtc.max_delay=10".into(), "vqvae.model.D=10".into()])
            .is_ok());
    }
}
