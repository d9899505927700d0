//! Experiment configuration.
//!
//! The file format is TOML with dotted keys mirroring `section.field`:
//!
//! ```toml
//! data.classes = 5
//! data.shift.hue_rotation_deg = 25.0
//! train.iterations = 4000
//! train.enable_patch = false
//! contrast.temperature = 0.1
//! ```
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set
//! key=value` overrides, then dedicated command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::geometry::CropSampler;
use crate::losses::ContrastConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), run_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Steps between target-validation evaluations (0 = only at the end).
    pub every: u64,
    /// Steps between checkpoints (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 500, checkpoint_every: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblateMode {
    /// Baseline, +pixel, +patch, both.
    #[default]
    Contrast,
    /// Both contrasts at each crop size.
    CropSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub mode: AblateMode,
    /// Seeds `train.seed`, `train.seed + 1`, ...
    pub seeds: usize,
    pub crop_sizes: Vec<usize>,
    /// Refuse to start when the estimated wall time exceeds this.
    pub time_budget_minutes: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { mode: AblateMode::Contrast, seeds: 3, crop_sizes: vec![32, 40, 48, 56], time_budget_minutes: 150.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub contrast: ContrastConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Defaults, then `file` (if any), then `overrides` of the form
    /// `section.field=value` with TOML-syntax values.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.contrast.validate()?;
        if self.train.patch_size % self.model.stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "train.patch_size {} must be a multiple of model.stride {}",
                self.train.patch_size, self.model.stride
            )));
        }
        if self.data.height % self.model.stride != 0 || self.data.width % self.model.stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "data.height/width must be multiples of model.stride {}",
                self.model.stride
            )));
        }
        let sizes = match self.ablate.mode {
            AblateMode::Contrast => vec![self.train.patch_size],
            AblateMode::CropSize => self.ablate.crop_sizes.clone(),
        };
        for p in sizes {
            if p % self.model.stride != 0 {
                return Err(Error::InvalidConfig(format!("crop size {p} is not a multiple of model.stride")));
            }
            let sampler = CropSampler {
                patch_size: p,
                resize_range: self.train.resize_range,
                iou_range: self.train.iou_range,
                stride: self.model.stride,
                max_attempts: 100,
            };
            sampler.feasible_ratio_range(self.data.height, self.data.width)?;
        }
        if self.ablate.seeds == 0 {
            return Err(Error::InvalidConfig("ablate.seeds must be positive".into()));
        }
        if !(self.ablate.time_budget_minutes > 0.0) {
            return Err(Error::InvalidConfig("ablate.time_budget_minutes must be positive".into()));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    // Parse as a TOML value; bare words fall back to strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
