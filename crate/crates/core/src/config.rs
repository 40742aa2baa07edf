//! Run configuration: one JSON document covering every stage, with named
//! presets that a config file can inherit from.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gnet::{GNetConfig, UpsampleMode};
use crate::projection::ProjectionConfig;
use crate::targetmaps::{DensityMapConfig, GaussianMapConfig, SigmaMode};
use crate::training::{MapSettings, TargetMode, TrainConfig};

pub const PRESETS: [&str; 3] = ["paper-delta-0.5", "paper-delta-1.0", "desk"];

/// Training knobs shared by all target modes; the loss and learning rate are
/// picked per mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub target_mode: TargetMode,
    pub lr_gaussian: f64,
    pub lr_density: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub augment: bool,
    pub split_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            target_mode: t.target_mode,
            lr_gaussian: TargetMode::GaussianAdaptive.default_lr(),
            lr_density: TargetMode::Density.default_lr(),
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            plateau_patience: t.plateau_patience,
            min_delta: t.min_delta,
            augment: t.augment,
            split_fraction: t.split_fraction,
            val_fraction: t.val_fraction,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub seed: u64,
    pub projection: ProjectionConfig,
    pub gaussian: GaussianMapConfig,
    pub density: DensityMapConfig,
    pub model: GNetConfig,
    pub train: TrainSettings,
    pub paths: Paths,
}

/// Learning rate used for desk-scale runs of every target mode.
pub const DESK_LR: f64 = 1e-3;
/// Epoch cap of desk-scale runs.
pub const DESK_MAX_EPOCHS: usize = 30;

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let paper = |delta: f64, sigma: f64, beta: f64| RunConfig {
            preset: Some(name.to_string()),
            seed: 0,
            projection: ProjectionConfig {
                delta,
                h_min: 0.235,
                h_max: 0.765,
                wrap_azimuth: true,
            },
            gaussian: GaussianMapConfig {
                mode: SigmaMode::Adaptive,
                sigma,
                p_t: 0.33,
                beta,
                ..GaussianMapConfig::default()
            },
            density: DensityMapConfig {
                f: 10.0,
                fallback_sigma: beta,
                ..DensityMapConfig::default()
            },
            model: GNetConfig {
                base_width: 64,
                upsample_mode: UpsampleMode::TransposeDilated,
                ..GNetConfig::default()
            },
            train: TrainSettings {
                lr_gaussian: 1e-6,
                lr_density: 1e-5,
                ..TrainSettings::default()
            },
            paths: Paths::default(),
        };
        match name {
            "paper-delta-0.5" => Ok(paper(0.5, 2.5, 5.0)),
            "paper-delta-1.0" => Ok(paper(1.0, 1.25, 2.5)),
            "desk" => {
                let mut c = paper(1.0, 1.25, 2.5);
                c.model.base_width = 8;
                c.train.lr_gaussian = DESK_LR;
                c.train.lr_density = DESK_LR;
                c.train.max_epochs = DESK_MAX_EPOCHS;
                Ok(c)
            }
            other => Err(Error::InvalidConfig(format!(
                "unknown preset `{other}`; choose one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a config document. A `preset` key selects the base values, which
    /// the remaining keys override field by field. Without a preset the base
    /// is `desk`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config is not valid JSON: {e}")))?;
        let base = match doc.get("preset") {
            Some(Value::String(p)) => p.clone(),
            Some(Value::Null) | None => "desk".to_string(),
            Some(other) => return Err(Error::InvalidConfig(format!("preset must be a string, got {other}"))),
        };
        Self::preset(&base)?.with_overrides(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// Deep-merges `overrides` into this config.
    pub fn with_overrides(&self, overrides: Value) -> Result<Self> {
        let mut base = serde_json::to_value(self).expect("config serialises");
        merge(&mut base, overrides);
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::InvalidConfig(format!("bad config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.gaussian.validate()?;
        self.density.validate()?;
        self.model.validate()?;
        self.train_config(self.train.target_mode).validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn map_settings(&self) -> MapSettings {
        MapSettings {
            gaussian: self.gaussian,
            density: self.density,
        }
    }

    /// Complete training config for one target mode.
    pub fn train_config(&self, mode: TargetMode) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            target_mode: mode,
            loss: mode.default_loss(),
            lr: match mode {
                TargetMode::Density => t.lr_density,
                _ => t.lr_gaussian,
            },
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            plateau_patience: t.plateau_patience,
            min_delta: t.min_delta,
            augment: t.augment,
            seed: self.seed,
            split_fraction: t.split_fraction,
            val_fraction: t.val_fraction,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset exists")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
