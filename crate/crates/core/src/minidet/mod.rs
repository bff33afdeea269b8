//! A miniature two-stage detector: a four-block conv backbone, a region
//! proposal network over a fixed anchor grid, and an ROI head that classifies
//! pooled proposals and refines their boxes.

mod checkpoint;
mod net;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use net::{
    backbone_forward, detect, detection_loss, detection_loss_with_proposals, roi_head_forward, rpn_forward, DetectConfig, Detection, DetectionLoss,
    Proposals, RpnOutput,
};
pub use params::{backbone_block, Bound, Group, ModelParams};

use crate::error::{ensure, Result};

/// Architecture and training-target hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each backbone block. Every block but the last is
    /// followed by a 2x2 max-pool.
    pub channels: Vec<usize>,
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    /// Width over height.
    pub anchor_ratios: Vec<f64>,
    pub pool_size: usize,
    pub roi_hidden: usize,
    pub num_classes: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub pre_nms_top_n: usize,
    pub proposal_nms: f64,
    pub post_nms_top_n: usize,
    pub roi_fg_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    /// Scale applied to ROI regression targets `(tx, ty, tw, th)`.
    pub box_weights: [f64; 4],
    /// Dropout rate in front of the rotation classifier.
    pub rotation_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![16, 32, 64, 64],
            rpn_channels: 64,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![1.0, 0.5, 2.0],
            pool_size: 4,
            roi_hidden: 256,
            num_classes: crate::scenes::NUM_CLASSES,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 32,
            rpn_fg_fraction: 0.5,
            pre_nms_top_n: 300,
            proposal_nms: 0.7,
            post_nms_top_n: 50,
            roi_fg_iou: 0.5,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
            box_weights: [10.0, 10.0, 5.0, 5.0],
            rotation_dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.channels.is_empty(), "backbone needs at least one block");
        ensure!(self.channels.iter().all(|&c| c > 0), "backbone channels must be positive");
        ensure!(self.rpn_channels > 0 && self.roi_hidden > 0, "hidden widths must be positive");
        ensure!(
            !self.anchor_scales.is_empty() && !self.anchor_ratios.is_empty(),
            "anchor scales and ratios must be non-empty"
        );
        ensure!(
            self.anchor_scales.iter().chain(&self.anchor_ratios).all(|&v| v > 0.0 && v.is_finite()),
            "anchor scales and ratios must be positive"
        );
        ensure!(self.pool_size > 0, "pool size must be positive");
        ensure!(self.num_classes > 0, "need at least one object class");
        ensure!(
            self.rpn_pos_iou > self.rpn_neg_iou && self.rpn_neg_iou >= 0.0 && self.rpn_pos_iou <= 1.0,
            "RPN IoU thresholds must satisfy 0 <= neg < pos <= 1"
        );
        ensure!(self.rpn_batch > 0 && self.roi_batch > 0, "sample batch sizes must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.rpn_fg_fraction) && (0.0..=1.0).contains(&self.roi_fg_fraction),
            "foreground fractions must lie in [0,1]"
        );
        ensure!(self.pre_nms_top_n > 0 && self.post_nms_top_n > 0, "proposal counts must be positive");
        ensure!((0.0..=1.0).contains(&self.proposal_nms), "proposal NMS threshold must lie in [0,1]");
        ensure!((0.0..=1.0).contains(&self.roi_fg_iou), "ROI foreground IoU must lie in [0,1]");
        ensure!(self.box_weights.iter().all(|&w| w > 0.0), "box weights must be positive");
        ensure!((0.0..1.0).contains(&self.rotation_dropout), "rotation dropout must lie in [0,1)");
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Image pixels per feature-map cell.
    pub fn stride(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }
}
