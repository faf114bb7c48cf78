//! Run configuration: TOML with one table per concern. Every key has a
//! default, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracker::{DescriptorMode, MatchingMode, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    pub detection: DetectionConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub nms_iou: f64,
    /// Image pixels per feature-map pixel.
    pub stride: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.2,
            stride: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub use_convlstm: bool,
    pub descriptor: DescriptorMode,
    /// `eagd-agd` only makes sense with trained GRU weights in `model.gru`.
    pub matching: MatchingMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            use_convlstm: false,
            descriptor: DescriptorMode::Agd,
            matching: MatchingMode::AgdAgd,
        }
    }
}

/// Parameter directories (QTNS tensors plus `manifest.json`). An empty path
/// means "initialize from `seed`". Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub appearance: String,
    pub geometry: String,
    pub gru: String,
    pub convlstm: String,
}

impl ModelConfig {
    /// The resolved path for a parameter directory, `None` when unset.
    pub fn resolve(&self, which: &str, base: &Path) -> Option<PathBuf> {
        let raw = match which {
            "appearance" => &self.appearance,
            "geometry" => &self.geometry,
            "gru" => &self.gru,
            "convlstm" => &self.convlstm,
            _ => return None,
        };
        if raw.is_empty() {
            None
        } else {
            Some(base.join(raw))
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::usage(format!("config: {}", e.message())))
    }

    /// Reads and validates a config file; parameter paths resolve against
    /// its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {}", path.display(), e)))?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate(&base)?;
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        self.tracker.validate()?;
        if !(self.detection.nms_iou > 0.0 && self.detection.nms_iou <= 1.0) {
            return Err(Error::usage(format!(
                "detection.nms_iou {} is outside (0, 1]",
                self.detection.nms_iou
            )));
        }
        if self.detection.stride == 0 {
            return Err(Error::usage("detection.stride must be positive"));
        }
        for which in ["appearance", "geometry", "gru", "convlstm"] {
            if let Some(p) = self.model.resolve(which, base) {
                if !p.join(crate::tensor::MANIFEST_FILE).is_file() {
                    return Err(Error::usage(format!(
                        "model.{} = {} is not a parameter directory",
                        which,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn printed_default_parses_back() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sections_override_fields() {
        let cfg = RunConfig::parse(
            "[tracker]\ntheta_m = 0.5\nk = 4\n[pipeline]\nmatching = \"eagd-agd\"\ndescriptor = \"geometry\"\n",
        )
        .unwrap();
        assert_eq!(cfg.tracker.theta_m, 0.5);
        assert_eq!(cfg.tracker.k, 4);
        assert_eq!(cfg.tracker.theta_h, 0.8);
        assert_eq!(cfg.pipeline.matching, MatchingMode::EagdAgd);
        assert_eq!(cfg.pipeline.descriptor, DescriptorMode::Geometry);
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        assert!(RunConfig::parse("[tracker]\ntheta_x = 1\n").is_err());
        let cfg = RunConfig::parse("[tracker]\ntheta_l = 0.9\ntheta_h = 0.5\n").unwrap();
        assert!(cfg.validate(Path::new(".")).is_err());
        let cfg = RunConfig::parse("[detection]\nnms_iou = 0\n").unwrap();
        assert!(cfg.validate(Path::new(".")).is_err());
    }

    #[test]
    fn missing_parameter_directory_is_rejected() {
        let cfg = RunConfig::parse("[model]\ngru = \"no/such/dir\"\n").unwrap();
        let err = cfg.validate(Path::new("/nonexistent")).unwrap_err();
        assert!(err.to_string().contains("model.gru"), "{}", err);
    }
}
