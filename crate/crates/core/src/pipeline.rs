//! Joint pretraining of detector and rotation head, and one-shot test-time
//! adaptation of the backbone through the rotation loss alone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{rotate_image, RotationLabel};
use crate::diffcore::{OptimizerState, Tape, Tensor};
use crate::error::{ensure, Error, Result};
use crate::minidet::{
    backbone_block, backbone_forward, detect, detection_loss, Bound, DetectConfig, Detection, Group, ModelConfig, ModelParams,
};
use crate::rotsup::{boxcrop, pseudo_boxes, rotation_head_forward, rotation_loss, sample_rotation, whole_image};
use crate::scenes::ImageSample;
use crate::seeding::{derive_rng, derive_seed, Stream};

/// Which regions feed the rotation head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationInput {
    /// The whole rotated image.
    Image,
    /// Ground-truth boxes (pretraining only).
    Boxcrop,
    /// Confident detections of the test image (adaptation only).
    Pseudobox,
}

/// One line of a training or adaptation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub step: usize,
    #[serde(rename = "L_d")]
    pub l_d: Option<f64>,
    #[serde(rename = "L_r")]
    pub l_r: Option<f64>,
    pub pseudo_boxes: Option<usize>,
    /// Stream position of the adapted image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the rotation loss; 0 trains a plain detector.
    pub lambda: f64,
    /// Fraction of `steps` after which the learning rate drops.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub rotation_input: RotationInput,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 6000,
            lr: 0.001,
            momentum: 0.9,
            lambda: 0.05,
            lr_decay_at: 5.0 / 7.0,
            lr_decay: 0.1,
            rotation_input: RotationInput::Boxcrop,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "pretrain learning rate must be positive");
        ensure!((0.0..1.0).contains(&self.momentum), "pretrain momentum must lie in [0,1)");
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), "pretrain lambda must be non-negative");
        ensure!((0.0..=1.0).contains(&self.lr_decay_at), "lr_decay_at must lie in [0,1]");
        ensure!(self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr_decay must lie in (0,1]");
        ensure!(
            self.rotation_input != RotationInput::Pseudobox,
            "pretraining uses image or boxcrop rotation input"
        );
        Ok(())
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let decay_step = (self.steps as f64 * self.lr_decay_at).round() as usize;
        if step >= decay_step {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Adaptation iterations per test image; 0 disables adaptation.
    pub gamma: i64,
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub rotation_input: RotationInput,
    pub pseudo_score_thresh: f64,
    pub max_pseudo_boxes: usize,
    /// 1 draws one random rotation per iteration; 4 uses all of them.
    pub rotations_per_iter: usize,
    /// Leading backbone blocks kept fixed.
    pub freeze_blocks: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            gamma: 30,
            lambda: 0.2,
            lr: 0.0003,
            momentum: 0.9,
            rotation_input: RotationInput::Pseudobox,
            pseudo_score_thresh: 0.5,
            max_pseudo_boxes: 8,
            rotations_per_iter: 1,
            freeze_blocks: 1,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.gamma >= 0, "gamma must be non-negative, got {}", self.gamma);
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), "adapt lambda must be non-negative");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "adapt learning rate must be positive");
        ensure!((0.0..1.0).contains(&self.momentum), "adapt momentum must lie in [0,1)");
        ensure!(
            self.rotation_input != RotationInput::Boxcrop,
            "adaptation uses image or pseudobox rotation input"
        );
        ensure!(
            (0.0..=1.0).contains(&self.pseudo_score_thresh),
            "pseudo-box score threshold must lie in [0,1]"
        );
        ensure!(self.max_pseudo_boxes > 0, "max_pseudo_boxes must be positive");
        ensure!(
            matches!(self.rotations_per_iter, 1 | 4),
            "rotations_per_iter must be 1 or 4, got {}",
            self.rotations_per_iter
        );
        Ok(())
    }
}

/// Losses of one pretraining step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub detection: f64,
    /// `None` when the rotation branch is off (`lambda == 0`).
    pub rotation: Option<f64>,
}

fn sgd_step(
    params: &mut ModelParams<f32>,
    opt: &mut OptimizerState<f32>,
    bound: &Bound,
    tape: &Tape<f32>,
    loss: crate::diffcore::Var,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let grads: BTreeMap<String, Vec<f32>> = bound.gradients(tape, &mut grads);
    ensure!(
        grads.values().all(|g| g.iter().all(|v| v.is_finite())),
        "non-finite gradient"
    );
    opt.step(params.iter_mut().filter(|(n, _)| trainable(n)), &grads)
}

/// One SGD step on `L_d + lambda * L_r` for a single image.
pub fn pretrain_step<R: Rng + ?Sized>(
    params: &mut ModelParams<f32>,
    model: &ModelConfig,
    cfg: &PretrainConfig,
    opt: &mut OptimizerState<f32>,
    sample: &ImageSample,
    rng: &mut R,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| true);
    let det = detection_loss(&mut tape, &bound, model, &sample.image, &sample.annotations, rng)?;
    let mut total = det.total;
    let mut rotation = None;
    if cfg.lambda > 0.0 {
        let q = sample_rotation(rng);
        let rotated = rotate_image(&sample.image, q)?;
        let fmap = backbone_forward(&mut tape, &bound, model, &rotated)?;
        let extent = image_extent(&sample.image);
        let pooled = match cfg.rotation_input {
            RotationInput::Boxcrop if !sample.annotations.is_empty() => {
                boxcrop(&mut tape, model, fmap, &sample.boxes(), q, extent)?
            }
            _ => whole_image(&mut tape, model, fmap, rotated_extent(extent, q))?,
        };
        let logits = rotation_head_forward(&mut tape, &bound, model, pooled, true, rng)?;
        let l_r = rotation_loss(&mut tape, &[(logits, q)])?;
        rotation = Some(tape.value(l_r).data()[0] as f64);
        let weighted = tape.scale(l_r, cfg.lambda as f32);
        total = tape.add(total, weighted)?;
    }
    let detection = tape.value(det.total).data()[0] as f64;
    sgd_step(params, opt, &bound, &tape, total, |_| true)?;
    Ok(StepLosses { detection, rotation })
}

fn image_extent(img: &Tensor<f32>) -> (f64, f64) {
    (img.shape()[2] as f64, img.shape()[1] as f64)
}

fn rotated_extent((w, h): (f64, f64), q: RotationLabel) -> (f64, f64) {
    q.rotated_extent(w, h)
}

/// Trains a fresh model on `data` for `cfg.steps` single-image steps,
/// reshuffling every epoch. `on_step` sees each log record as it happens.
pub fn pretrain(
    data: &[ImageSample],
    model: &ModelConfig,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<ModelParams<f32>> {
    model.validate()?;
    cfg.validate()?;
    ensure!(!data.is_empty(), "pretraining needs at least one image");
    let mut params = ModelParams::init(model, &mut derive_rng(cfg.seed, Stream::Init, 0));
    let mut opt = OptimizerState::new(cfg.lr as f32, cfg.momentum as f32)?;
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        let pos = step % data.len();
        if pos == 0 {
            order = (0..data.len()).collect();
            order.shuffle(&mut derive_rng(cfg.seed, Stream::Shuffle, (step / data.len()) as u64));
        }
        opt.lr = cfg.lr_at(step) as f32;
        let mut rng = derive_rng(cfg.seed, Stream::Pretrain, step as u64);
        let losses = pretrain_step(&mut params, model, cfg, &mut opt, &data[order[pos]], &mut rng)?;
        if !params.all_finite() {
            return Err(Error::contract(format!("parameters diverged at pretraining step {step}")));
        }
        on_step(&LogRecord {
            phase: "pretrain".into(),
            step,
            l_d: Some(losses.detection),
            l_r: losses.rotation,
            pseudo_boxes: None,
            image: None,
        });
    }
    Ok(params)
}

/// Fraction of ground-truth regions whose rotation the head predicts, over
/// all four rotations of every sample (dropout off).
pub fn rotation_accuracy(params: &ModelParams<f32>, model: &ModelConfig, data: &[ImageSample]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    let mut unused = derive_rng(0, Stream::Sampling, 0);
    for sample in data.iter().filter(|s| !s.annotations.is_empty()) {
        let extent = image_extent(&sample.image);
        for q in RotationLabel::ALL {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| false);
            let rotated = rotate_image(&sample.image, q)?;
            let fmap = backbone_forward(&mut tape, &bound, model, &rotated)?;
            let pooled = boxcrop(&mut tape, model, fmap, &sample.boxes(), q, extent)?;
            let logits = rotation_head_forward(&mut tape, &bound, model, pooled, false, &mut unused)?;
            for row in tape.value(logits).data().chunks(4) {
                let best = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                hits += (best == q.class_index()) as usize;
                total += 1;
            }
        }
    }
    ensure!(total > 0, "rotation accuracy needs annotated samples");
    Ok(hits as f64 / total as f64)
}

/// What one adaptation iteration did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptRecord {
    pub iteration: usize,
    /// Unweighted rotation loss before the update.
    pub rotation_loss: f64,
    pub pseudo_boxes: usize,
    /// True when no detection was confident enough and the whole image was
    /// used instead.
    pub fallback: bool,
}

impl AdaptRecord {
    pub fn log(&self, image: usize) -> LogRecord {
        LogRecord {
            phase: "adapt".into(),
            step: self.iteration,
            l_d: None,
            l_r: Some(self.rotation_loss),
            pseudo_boxes: Some(self.pseudo_boxes),
            image: Some(image),
        }
    }
}

fn adaptable(name: &str, freeze_blocks: usize) -> bool {
    match Group::of(name) {
        Some(Group::Rotation) => true,
        Some(Group::Backbone) => backbone_block(name).is_some_and(|b| b > freeze_blocks),
        _ => false,
    }
}

/// Fine-tunes a copy of `params` on a single unlabeled image by minimizing
/// the rotation loss. Detector heads and the frozen leading blocks are never
/// touched; the optimizer starts with zero velocity.
pub fn adapt_one(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    image: &Tensor<f32>,
    seed: u64,
) -> Result<(ModelParams<f32>, Vec<AdaptRecord>)> {
    cfg.validate()?;
    adapt_run(params, model, cfg, image, seed, cfg.gamma as usize, |_, _| Ok(()))
}

/// Runs `iterations` adaptation steps, calling `visit(done, weights)` before
/// the first step and after every step. Step `i` depends only on `seed`, `i`,
/// and the weights so far, so a shorter run is a prefix of a longer one.
fn adapt_run(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    image: &Tensor<f32>,
    seed: u64,
    iterations: usize,
    mut visit: impl FnMut(usize, &ModelParams<f32>) -> Result<()>,
) -> Result<(ModelParams<f32>, Vec<AdaptRecord>)> {
    let mut adapted = params.clone();
    let mut opt = OptimizerState::new(cfg.lr as f32, cfg.momentum as f32)?;
    let extent = image_extent(image);
    let pseudo_cfg = DetectConfig {
        score_thresh: cfg.pseudo_score_thresh,
        ..DetectConfig::default()
    };
    let trainable = |n: &str| adaptable(n, cfg.freeze_blocks);
    let mut records = Vec::with_capacity(iterations);
    visit(0, &adapted)?;
    for it in 0..iterations {
        let mut rng = derive_rng(seed, Stream::Adapt, it as u64);
        let boxes = if cfg.rotation_input == RotationInput::Pseudobox {
            let dets = detect(&adapted, model, image, &pseudo_cfg)?;
            pseudo_boxes(&dets, cfg.pseudo_score_thresh, cfg.max_pseudo_boxes)
        } else {
            Vec::new()
        };
        let rotations: Vec<RotationLabel> = if cfg.rotations_per_iter == 4 {
            RotationLabel::ALL.to_vec()
        } else {
            vec![sample_rotation(&mut rng)]
        };
        let mut tape = Tape::new();
        let bound = adapted.bind(&mut tape, trainable);
        let mut parts = Vec::with_capacity(rotations.len());
        for q in rotations {
            let rotated = rotate_image(image, q)?;
            let fmap = backbone_forward(&mut tape, &bound, model, &rotated)?;
            let pooled = if boxes.is_empty() {
                whole_image(&mut tape, model, fmap, rotated_extent(extent, q))?
            } else {
                boxcrop(&mut tape, model, fmap, &boxes, q, extent)?
            };
            let logits = rotation_head_forward(&mut tape, &bound, model, pooled, true, &mut rng)?;
            parts.push((logits, q));
        }
        let l_r = rotation_loss(&mut tape, &parts)?;
        records.push(AdaptRecord {
            iteration: it,
            rotation_loss: tape.value(l_r).data()[0] as f64,
            pseudo_boxes: boxes.len(),
            fallback: boxes.is_empty(),
        });
        let loss = tape.scale(l_r, cfg.lambda as f32);
        sgd_step(&mut adapted, &mut opt, &bound, &tape, loss, trainable)?;
        if !adapted.all_finite() {
            return Err(Error::contract(format!("parameters diverged at adaptation iteration {it}")));
        }
        visit(it + 1, &adapted)?;
    }
    Ok((adapted, records))
}

/// Adapts to `image` and then detects on it with the adapted weights.
pub fn predict_with_adaptation(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    dc: &DetectConfig,
    image: &Tensor<f32>,
    seed: u64,
) -> Result<Vec<Detection>> {
    let mut out = predict_at_gammas(params, model, cfg, dc, image, seed, &[cfg.gamma])?;
    Ok(out.pop().expect("one gamma requested"))
}

/// Detections after each adaptation length in `gammas` (any order), taken
/// from a single run to the largest one. `cfg.gamma` is ignored.
pub fn predict_at_gammas(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    dc: &DetectConfig,
    image: &Tensor<f32>,
    seed: u64,
    gammas: &[i64],
) -> Result<Vec<Vec<Detection>>> {
    Ok(predict_at_gammas_logged(params, model, cfg, dc, image, seed, gammas)?.0)
}

fn predict_at_gammas_logged(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    dc: &DetectConfig,
    image: &Tensor<f32>,
    seed: u64,
    gammas: &[i64],
) -> Result<(Vec<Vec<Detection>>, Vec<AdaptRecord>)> {
    cfg.validate()?;
    for &g in gammas {
        ensure!(g >= 0, "gamma must be non-negative, got {g}");
    }
    let longest = gammas.iter().copied().max().unwrap_or(0) as usize;
    let mut out: Vec<Option<Vec<Detection>>> = vec![None; gammas.len()];
    let (_, records) = adapt_run(params, model, cfg, image, seed, longest, |done, weights| {
        if gammas.contains(&(done as i64)) {
            let dets = detect(weights, model, image, dc)?;
            for (slot, _) in out.iter_mut().zip(gammas).filter(|(_, &g)| g as usize == done) {
                *slot = Some(dets.clone());
            }
        }
        Ok(())
    })?;
    let dets = out.into_iter().map(|d| d.expect("every gamma visited")).collect();
    Ok((dets, records))
}

/// Seed for adapting to one sample; depends on the sample alone, not on its
/// position in the stream.
pub fn sample_adapt_seed(cfg: &AdaptConfig, sample: &ImageSample) -> u64 {
    derive_seed(cfg.seed, Stream::Adapt, sample.sample_seed)
}

/// Detections for every sample, each from weights adapted to that sample
/// alone. Runs on `jobs` threads; the result does not depend on `jobs`.
pub fn evaluate_stream(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    dc: &DetectConfig,
    data: &[ImageSample],
    jobs: usize,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = evaluate_stream_gammas(params, model, cfg, dc, data, &[cfg.gamma], jobs)?;
    Ok(out.pop().expect("one gamma requested"))
}

/// [`evaluate_stream`] for several adaptation lengths at once, indexed
/// `[gamma][image]`.
pub fn evaluate_stream_gammas(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    dc: &DetectConfig,
    data: &[ImageSample],
    gammas: &[i64],
    jobs: usize,
) -> Result<Vec<Vec<Vec<Detection>>>> {
    Ok(evaluate_stream_logged(params, model, cfg, dc, data, gammas, jobs)?.detections)
}

/// Detections per adaptation length plus each image's adaptation records.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    /// `[gamma][image]`.
    pub detections: Vec<Vec<Vec<Detection>>>,
    /// `[image]`, covering the longest run.
    pub records: Vec<Vec<AdaptRecord>>,
}

pub fn evaluate_stream_logged(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    cfg: &AdaptConfig,
    dc: &DetectConfig,
    data: &[ImageSample],
    gammas: &[i64],
    jobs: usize,
) -> Result<StreamOutput> {
    cfg.validate()?;
    dc.validate()?;
    ensure!(!data.is_empty(), "evaluation needs at least one image");
    let pool = crate::thread_pool(jobs)?;
    let per_image: Vec<(Vec<Vec<Detection>>, Vec<AdaptRecord>)> = pool.install(|| {
        data.par_iter()
            .map(|s| predict_at_gammas_logged(params, model, cfg, dc, &s.image, sample_adapt_seed(cfg, s), gammas))
            .collect::<Result<_>>()
    })?;
    let detections = (0..gammas.len())
        .map(|g| per_image.iter().map(|(d, _)| d[g].clone()).collect())
        .collect();
    let records = per_image.into_iter().map(|(_, r)| r).collect();
    Ok(StreamOutput { detections, records })
}
