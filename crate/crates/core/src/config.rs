//! Run configuration: model widths, loss constants, assigner ranges,
//! postprocessing and optimizer settings. Loaded from a single JSON document;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegLossKind {
    Ciou,
    Giou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionCfg {
    F64,
    F32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Square input size; must be a multiple of 32.
    pub image_size: usize,
    pub stem_width: usize,
    pub backbone_widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub gc_enabled: bool,
    pub gc_ratio: usize,
    pub fpn_width: usize,
    pub fpn_smoothing: bool,
    pub head_depth: usize,
    pub use_sepc: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub reg_loss: RegLossKind,
    pub strides: [usize; 3],
    /// Boundaries between the per-level regression ranges:
    /// (0, b0], (b0, b1], (b1, inf).
    pub range_bounds: [f64; 2],
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub pre_nms_topk: usize,
    pub max_detections: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub hflip: bool,
    pub precision: PrecisionCfg,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            image_size: 256,
            stem_width: 16,
            backbone_widths: [32, 64, 128],
            blocks_per_stage: 2,
            gc_enabled: true,
            gc_ratio: 4,
            fpn_width: 64,
            fpn_smoothing: true,
            head_depth: 4,
            use_sepc: true,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            reg_loss: RegLossKind::Ciou,
            strides: [8, 16, 32],
            range_bounds: [64.0, 128.0],
            nms_iou: 0.6,
            score_threshold: 0.05,
            pre_nms_topk: 100,
            max_detections: 100,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            epochs: 12,
            batch_size: 2,
            grad_clip: 10.0,
            pixel_mean: [0.5, 0.5, 0.5],
            pixel_std: [0.25, 0.25, 0.25],
            hflip: false,
            precision: PrecisionCfg::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        for (i, &w) in self.backbone_widths.iter().enumerate() {
            if w == 0 {
                return Err(Error::Config(format!("backbone width {} is zero", i)));
            }
            if self.gc_enabled && w % self.gc_ratio != 0 {
                return Err(Error::Config(format!(
                    "gc_ratio {} must divide backbone width {}",
                    self.gc_ratio, w
                )));
            }
        }
        if self.fpn_width == 0 {
            return Err(Error::Config("fpn_width must be positive".into()));
        }
        if self.head_depth == 0 {
            return Err(Error::Config("head_depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.focal_alpha) || self.focal_alpha == 0.0 {
            return Err(Error::Config("focal_alpha must lie in (0,1)".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be nonnegative".into()));
        }
        if self.strides != [8, 16, 32] {
            return Err(Error::Config("strides must be [8,16,32]".into()));
        }
        if !(self.range_bounds[0] > 0.0 && self.range_bounds[1] > self.range_bounds[0]) {
            return Err(Error::Config(
                "range_bounds must be increasing and positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("nms_iou must lie in [0,1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.lr <= 0.0 || self.decay_factor <= 0.0 {
            return Err(Error::Config("lr and decay_factor must be positive".into()));
        }
        for &s in &self.pixel_std {
            if s <= 0.0 {
                return Err(Error::Config("pixel_std entries must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let cfg: Self = serde_json::from_reader(f)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    /// Inclusive upper bound of each level's regression range; the last level
    /// is unbounded.
    pub fn level_ranges(&self) -> [(f64, f64); 3] {
        let [b0, b1] = self.range_bounds;
        [(0.0, b0), (b0, b1), (b1, f64::INFINITY)]
    }

    /// A deliberately tiny configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            stem_width: 4,
            backbone_widths: [4, 8, 8],
            blocks_per_stage: 1,
            gc_ratio: 2,
            fpn_width: 4,
            head_depth: 2,
            batch_size: 1,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<ModelConfig, _> =
            serde_json::from_str(r#"{"num_classes": 2, "bogus_key": 1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ModelConfig::default();
        c.image_size = 100;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.range_bounds = [128.0, 64.0];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.gc_ratio = 5; // does not divide 32/64/128
        assert!(c.validate().is_err());
    }
}
