use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::SpatialSoftmax;

/// Which branches exist and how they are merged at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "sfm+cfm")]
    SfmCfm,
    #[serde(rename = "sfm+pwa")]
    SfmPwa,
    #[serde(rename = "cfm-only")]
    CfmOnly,
    #[serde(rename = "pwa-only")]
    PwaOnly,
    #[serde(rename = "rgb-only")]
    RgbOnly,
    #[serde(rename = "sar-only")]
    SarOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::RgbOnly,
        FusionMode::SarOnly,
        FusionMode::PwaOnly,
        FusionMode::CfmOnly,
        FusionMode::SfmPwa,
        FusionMode::SfmCfm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::SfmCfm => "sfm+cfm",
            FusionMode::SfmPwa => "sfm+pwa",
            FusionMode::CfmOnly => "cfm-only",
            FusionMode::PwaOnly => "pwa-only",
            FusionMode::RgbOnly => "rgb-only",
            FusionMode::SarOnly => "sar-only",
        }
    }

    pub fn uses_rgb(self) -> bool {
        self != FusionMode::SarOnly
    }

    pub fn uses_sar(self) -> bool {
        self != FusionMode::RgbOnly
    }

    pub fn uses_sfm(self) -> bool {
        matches!(self, FusionMode::SfmCfm | FusionMode::SfmPwa)
    }

    pub fn uses_cfm(self) -> bool {
        matches!(self, FusionMode::SfmCfm | FusionMode::CfmOnly)
    }

    /// Whether the stage mask has any effect in this mode.
    pub fn has_fusion_modules(self) -> bool {
        self.uses_sfm() || self.uses_cfm()
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = FusionMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown fusion mode `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

fn default_widths() -> Vec<usize> {
    vec![32, 64, 128, 256]
}
fn default_blocks() -> usize {
    2
}
fn default_classes() -> usize {
    4
}
fn default_size() -> usize {
    64
}
fn default_mode() -> FusionMode {
    FusionMode::SfmCfm
}
fn default_stages() -> Vec<usize> {
    vec![1, 2, 3, 4]
}
fn default_true() -> bool {
    true
}
fn default_decoder_width() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_mode")]
    pub fusion: FusionMode,
    /// 1-based stages where SFM/CFM are active.
    #[serde(default = "default_stages")]
    pub stages: Vec<usize>,
    /// Add the SFM output to the branch features instead of replacing them.
    #[serde(default = "default_true")]
    pub sfm_residual: bool,
    #[serde(default)]
    pub softmax: SpatialSoftmax,
    #[serde(default = "default_decoder_width")]
    pub decoder_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: default_widths(),
            blocks: default_blocks(),
            num_classes: default_classes(),
            height: default_size(),
            width: default_size(),
            fusion: default_mode(),
            stages: default_stages(),
            sfm_residual: true,
            softmax: SpatialSoftmax::default(),
            decoder_width: default_decoder_width(),
        }
    }
}

pub const NUM_STAGES: usize = 4;
pub const RGB_CHANNELS: usize = 3;
pub const SAR_CHANNELS: usize = 1;

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "expected {NUM_STAGES} stage widths, got {}",
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("stage widths must be positive, got {:?}", self.widths)));
        }
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder_width must be positive".into()));
        }
        if !(1..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must lie in 1..=255, got {}",
                self.num_classes
            )));
        }
        let step = 1 << NUM_STAGES;
        if self.height == 0 || self.width == 0 || self.height % step != 0 || self.width % step != 0 {
            return Err(Error::Geometry(format!(
                "input size {}×{} must be a positive multiple of {step}",
                self.height, self.width
            )));
        }
        let mut seen = [false; NUM_STAGES];
        for &s in &self.stages {
            if !(1..=NUM_STAGES).contains(&s) {
                return Err(Error::Config(format!("stage {s} outside 1..={NUM_STAGES}")));
            }
            if std::mem::replace(&mut seen[s - 1], true) {
                return Err(Error::Config(format!("stage {s} listed twice")));
            }
        }
        if self.stages.is_empty() && self.fusion.has_fusion_modules() {
            return Err(Error::Config(format!(
                "mode {} needs at least one active stage",
                self.fusion
            )));
        }
        Ok(())
    }

    /// Whether SFM/CFM modules exist at the 1-based `stage`.
    pub fn stage_active(&self, stage: usize) -> bool {
        self.fusion.has_fusion_modules() && self.stages.contains(&stage)
    }

    pub fn with_mode(&self, fusion: FusionMode) -> Self {
        NetConfig {
            fusion,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_roundtrip() {
        for m in FusionMode::ALL {
            assert_eq!(m.name().parse::<FusionMode>().unwrap(), m);
        }
        assert!(matches!("sfm".parse::<FusionMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        assert!(NetConfig::default().validate().is_ok());
        let bad = |f: fn(&mut NetConfig)| {
            let mut c = NetConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(matches!(bad(|c| c.height = 40), Error::Geometry(_)));
        assert!(matches!(bad(|c| c.widths[2] = 0), Error::Config(_)));
        assert!(matches!(bad(|c| {
            c.widths.pop();
        }), Error::Config(_)));
        assert!(matches!(bad(|c| c.stages = vec![]), Error::Config(_)));
        assert!(matches!(bad(|c| c.stages = vec![5]), Error::Config(_)));
        assert!(matches!(bad(|c| c.stages = vec![2, 2]), Error::Config(_)));
        let mut c = NetConfig::default().with_mode(FusionMode::PwaOnly);
        c.stages.clear();
        assert!(c.validate().is_ok());
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let c: NetConfig = toml::from_str("fusion = \"pwa-only\"\nwidths = [8, 16, 32, 64]\n").unwrap();
        assert_eq!(c.fusion, FusionMode::PwaOnly);
        assert_eq!(c.blocks, 2);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<NetConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<NetConfig>("depth = 3\n").is_err());
    }
}
