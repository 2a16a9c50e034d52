//! The single JSON run document: data generator, windowing, model, heads,
//! optimizer, paths and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticConfig, WindowConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;
use crate::uncertainty::UqConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization, shuffling and dropout masks.
    pub seed: u64,
    pub variant: Variant,
    pub data: SyntheticConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub uq: UqConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: Variant::Full,
            data: SyntheticConfig::default(),
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            uq: UqConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Smallest multiple of `2^stages` that is at least `t_in`.
pub fn required_pad(t_in: usize, stages: usize) -> usize {
    let m = 1usize << stages;
    t_in.div_ceil(m) * m
}

impl RunConfig {
    /// Parses, fills derived fields and validates.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    /// Derives the padded input length and validates every section.
    pub fn resolve(&mut self) -> Result<()> {
        let w = &mut self.window;
        if w.t_in == 0 {
            return Err(Error::config("window.t_in", "must be at least 1"));
        }
        if w.t_out == 0 {
            return Err(Error::config("window.t_out", "must be at least 1"));
        }
        let stages = self.model.backbone.stages;
        let need = required_pad(w.t_in, stages);
        match w.pad_to {
            None => w.pad_to = Some(need),
            Some(p) if p < w.t_in || p % (1 << stages) != 0 => {
                return Err(Error::config(
                    "window.pad_to",
                    format!(
                        "{} must be at least t_in = {} and a multiple of 2^{}",
                        p, w.t_in, stages
                    ),
                ));
            }
            Some(_) => {}
        }
        let r = w.ratios;
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::config(
                "window.ratios",
                format!("{:?} must be positive and sum to 1", r),
            ));
        }
        if !(w.cal_fraction > 0.0 && w.cal_fraction < 1.0) {
            return Err(Error::config("window.cal_fraction", "must lie in (0, 1)"));
        }
        self.data.validate().map_err(|e| match e {
            Error::Parameter(msg) => {
                let field = msg.split(':').next().unwrap_or("data").to_string();
                Error::Config { field, reason: msg }
            }
            other => other,
        })?;
        self.model.validate()?;
        self.uq.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
