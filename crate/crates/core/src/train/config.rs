use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AdamW;
use crate::error::{Error, Result};
use crate::network::NetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Horizontal flip with probability 0.5.
    #[serde(default = "default_true")]
    pub flip: bool,
    /// Random crop to the network input size when scenes are larger.
    #[serde(default = "default_true")]
    pub crop: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { flip: true, crop: true }
    }
}

fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    8
}
fn default_iterations() -> u64 {
    2000
}
fn default_eval_interval() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: AdamW,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default)]
    pub seed: u64,
    /// Dataset directory holding `manifest.toml`.
    #[serde(default)]
    pub data: PathBuf,
    #[serde(default)]
    pub augment: Augment,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamW::default(),
            batch_size: default_batch(),
            iterations: default_iterations(),
            eval_interval: default_eval_interval(),
            seed: 0,
            data: PathBuf::new(),
            augment: Augment::default(),
            precision: Precision::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_interval == 0 || self.iterations < self.eval_interval {
            return Err(Error::Config(format!(
                "need 0 < eval_interval ≤ iterations, got {} and {}",
                self.eval_interval, self.iterations
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Reads a config file; a relative `data` path is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })?;
        if cfg.data.is_relative() && !cfg.data.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.data = dir.join(&cfg.data);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FusionMode;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.optimizer.lr, c.optimizer.beta1, c.optimizer.beta2), (1e-4, 0.9, 0.999));
        assert_eq!((c.optimizer.weight_decay, c.optimizer.eps), (0.05, 1e-8));
        assert_eq!((c.batch_size, c.iterations, c.eval_interval), (8, 2000, 500));
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = TrainConfig {
            seed: 9,
            net: NetConfig { fusion: FusionMode::CfmOnly, ..NetConfig::default() },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("iterations = 600\n[net]\nfusion = \"rgb-only\"\n").unwrap();
        assert_eq!(partial.iterations, 600);
        assert_eq!(partial.net.fusion, FusionMode::RgbOnly);
        assert_eq!(partial.batch_size, 8);
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig::from_toml("iterations = 100\n").is_err());
        assert!(TrainConfig::from_toml("bogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("[optimizer]\nlr = 1e-3\nbeta1 = 1.0\nbeta2 = 0.9\nweight_decay = 0.0\neps = 1e-8\n").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0\n").is_err());
    }

    #[test]
    fn data_path_is_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        fs::write(&path, "data = \"scenes\"\n").unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap().data, dir.path().join("scenes"));
        assert!(matches!(TrainConfig::load(&dir.path().join("nope.toml")), Err(Error::Io { .. })));
    }
}
