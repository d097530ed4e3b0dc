//! Run configuration and its text format.
//!
//! A config file holds one `dotted.key = <JSON value>` assignment per line
//! over the defaults; blank lines and lines starting with `#` are skipped:
//!
//! ```text
//! seed = 7
//! train.lr = 0.01
//! net.widths = [4, 8, 16, 16, 32, 32]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::froc::TOLERANCES_MM;
use crate::nn::augment::AugmentConfig;
use crate::nn::net::NetConfig;
use crate::nn::sgd::SgdConfig;
use crate::phantom::PhantomSpec;
use crate::proposal::{AnchorSpec, LabelRule};
use crate::volume::{HU_MAX, HU_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub spacing_mm: f64,
    pub hu_min: f64,
    pub hu_max: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            spacing_mm: 1.0,
            hu_min: HU_MIN,
            hu_max: HU_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Proposal-only epochs; one crop per training scan per epoch.
    pub epochs: usize,
    /// Joint epochs with the false-positive stage.
    pub joint_epochs: usize,
    pub crop_side: usize,
    /// Share of crops centred (with jitter) on an embolus.
    pub positive_crop_fraction: f64,
    pub crop_jitter_mm: f64,
    /// Weight of the regression term.
    pub lambda: f64,
    /// Random negatives drawn per crop before hard mining.
    pub ohem_pool: usize,
    /// Hardest negatives kept per crop.
    pub ohem_keep: usize,
    pub fp_batch: usize,
    /// Largest negative:positive ratio in a false-positive batch.
    pub fp_negative_ratio: usize,
    /// Proposals considered per crop for the false-positive batch.
    pub fp_candidates: usize,
    pub fp_prob_threshold: f64,
    pub fp_loss_weight: f64,
    /// Scale of the false-positive gradient passed back into the backbone.
    pub fp_backbone_grad: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            epochs: 20,
            joint_epochs: 5,
            crop_side: 48,
            positive_crop_fraction: 0.5,
            crop_jitter_mm: 12.0,
            lambda: 1.0,
            ohem_pool: 128,
            ohem_keep: 32,
            fp_batch: 128,
            fp_negative_ratio: 3,
            fp_candidates: 256,
            fp_prob_threshold: 0.1,
            fp_loss_weight: 1.0,
            fp_backbone_grad: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// How the final detection probability is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Proposal probability only; the false-positive stage is skipped.
    Proposal,
    /// False-positive classifier probability.
    Classifier,
    /// Product of the proposal and classifier probabilities.
    Product,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub tile_side: usize,
    pub tile_overlap: usize,
    pub prob_threshold: f64,
    pub nms_iou: f64,
    /// Proposals kept per tile after suppression.
    pub max_candidates: usize,
    pub score: ScoreMode,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            tile_side: 96,
            tile_overlap: 16,
            prob_threshold: 0.1,
            nms_iou: 0.1,
            max_candidates: 100,
            score: ScoreMode::Classifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerances_mm: Vec<f64>,
    /// FP/scan operating point reported as the summary sensitivity.
    pub operating_fp: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerances_mm: TOLERANCES_MM.to_vec(),
            operating_fp: 2.0,
        }
    }
}

/// Default locations used by the command-line tools when no flag is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoint: "model".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub phantom: PhantomSpec,
    pub anchors: AnchorSpec,
    pub labels: LabelRule,
    pub net: NetConfig,
    pub align: AlignConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.net.validate()?;
        self.phantom.validate()?;
        if self.net.n_scales != self.anchors.n_scales() {
            return Err(config_err(format!(
                "net.n_scales = {} but {} anchor scales are configured",
                self.net.n_scales,
                self.anchors.n_scales()
            )));
        }
        if self.anchors.feature_stride != crate::nn::net::FEATURE_STRIDE {
            return Err(config_err(format!(
                "anchors.feature_stride must be {}",
                crate::nn::net::FEATURE_STRIDE
            )));
        }
        let m = crate::nn::net::INPUT_MULTIPLE;
        for (name, v) in [
            ("train.crop_side", self.train.crop_side),
            ("detect.tile_side", self.detect.tile_side),
        ] {
            if v == 0 || v % m != 0 {
                return Err(config_err(format!(
                    "{name} must be a positive multiple of {m}, got {v}"
                )));
            }
        }
        if self.detect.tile_overlap >= self.detect.tile_side {
            return Err(config_err(
                "detect.tile_overlap must be below detect.tile_side",
            ));
        }
        if !(self.preprocess.spacing_mm > 0.0) || !(self.preprocess.hu_min < self.preprocess.hu_max)
        {
            return Err(config_err(
                "preprocess spacing must be positive and the HU window ordered",
            ));
        }
        if !(0.0..=1.0).contains(&self.train.positive_crop_fraction) {
            return Err(config_err(
                "train.positive_crop_fraction must lie in [0, 1]",
            ));
        }
        if self.train.lr < 0.0 || self.train.fp_batch == 0 || self.train.ohem_keep == 0 {
            return Err(config_err("train.lr must be >= 0 and batch sizes positive"));
        }
        if self.align.feature_extent < self.align.roi_size {
            return Err(config_err(
                "align.feature_extent must be at least align.roi_size",
            ));
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&self, text: &str, source: &Path) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serialises");
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fmt = |msg: String| Error::Format {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fmt("expected `key = value`".into()))?;
            let value: Value = serde_json::from_str(value.trim())
                .map_err(|e| fmt(format!("value of {}: {e}", key.trim())))?;
            set_path(&mut tree, key.trim(), value).map_err(fmt)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Format {
            path: source.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::default().apply_text(&text, path)
    }

    /// Set a single dotted key (as from a command-line override).
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        self.apply_text(&format!("{key} = {value}"), Path::new("<override>"))
    }

    /// Every leaf as `key = value` lines, loadable by [`RunConfig::load`].
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        flatten("", &tree, &mut out);
        out
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("{} is not a section", parts[..depth].join(".")))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| format!("unknown key {key}"))?;
    }
    if node.is_object() {
        return Err(format!("{key} is a section, not a value"));
    }
    *node = value;
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.push_str(&format!("{prefix} = {leaf}\n"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let d = RunConfig::default();
        d.validate().unwrap();
        assert_eq!(d.train.lr, 0.001);
        assert_eq!(d.train.ohem_pool, 128);
        assert_eq!(d.anchors.scales, vec![10.0, 30.0, 60.0]);
        let back = RunConfig::default()
            .apply_text(&d.to_text(), Path::new("x"))
            .unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::default()
            .apply_text("# comment\n\ntrain.lr = 0.5\nnet.widths = [4,8,16,16,32,32]\ndetect.score = \"product\"\n", Path::new("c"))
            .unwrap();
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.net.widths[0], 4);
        assert_eq!(c.detect.score, ScoreMode::Product);
        let e = RunConfig::default()
            .apply_text("seed = 1\ntrain.nope = 1\n", Path::new("c"))
            .unwrap_err();
        assert!(
            e.to_string().contains(":2:") && e.to_string().contains("unknown key"),
            "{e}"
        );
        assert!(RunConfig::default().set("train", "1").is_err());
        assert!(RunConfig::default().set("train.crop_side", "50").is_err());
        assert!(RunConfig::default().set("train.lr", "\"fast\"").is_err());
    }
}
