//! The run configuration: one JSON document with `data`, `model`,
//! `pretrain`, `adapt`, and `eval` sections. Every section and key is
//! optional; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::minidet::{DetectConfig, ModelConfig};
use crate::pipeline::{AdaptConfig, PretrainConfig};
use crate::scenes::StyleMix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Index of the first generated scene.
    pub first: u64,
    pub count: usize,
    /// `plain`, `mixed`, or a comma list such as `fog,noise`.
    pub styles: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            first: 0,
            count: 2000,
            styles: "plain".into(),
        }
    }
}

impl DataConfig {
    pub fn style_mix(&self) -> Result<StyleMix> {
        StyleMix::parse(&self.styles).map_err(|e| Error::Config(format!("data.styles: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
    /// IoU a detection needs to count as a hit.
    pub iou_thresh: f64,
    pub gammas: Vec<i64>,
    /// Detections examined by the error analysis; defaults to the number of
    /// images.
    pub top_k: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = DetectConfig::default();
        EvalConfig {
            score_thresh: d.score_thresh,
            nms_thresh: d.nms_thresh,
            max_detections: d.max_detections,
            iou_thresh: 0.5,
            gammas: vec![0, 10, 30, 70],
            top_k: None,
        }
    }
}

impl EvalConfig {
    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            score_thresh: self.score_thresh,
            nms_thresh: self.nms_thresh,
            max_detections: self.max_detections,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a config document. Malformed JSON and unknown keys are
    /// configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.data.style_mix()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.eval.detect_config().validate()?;
        ensure!(
            (0.0..=1.0).contains(&self.eval.iou_thresh),
            "eval.iou_thresh must lie in [0,1]"
        );
        Ok(())
    }
}
