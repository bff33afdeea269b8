//! Self-supervised rotation prediction: a linear classifier over pooled
//! features of a rotated image, predicting which of the four right-angle
//! rotations was applied.

use rand::Rng;

use crate::boxgeom::{roi_pool, rotate_box, BBox, RotationLabel};
use crate::diffcore::{Float, Tape, Var};
use crate::error::{ensure, Result};
use crate::minidet::{Bound, Detection, ModelConfig};

/// Uniform draw over the four rotations.
pub fn sample_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationLabel {
    RotationLabel::ALL[rng.random_range(0..4)]
}

/// `[N,C,p,p]` pooled regions to `[N,4]` rotation logits, with dropout on
/// the flattened features while training.
pub fn rotation_head_forward<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    pooled: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let s = tape.shape(pooled).to_vec();
    ensure!(s.len() == 4, "rotation head expects [N,C,p,p] regions, got {s:?}");
    let x = tape.reshape(pooled, vec![s[0], s[1] * s[2] * s[3]])?;
    let x = tape.dropout(x, cfg.rotation_dropout, rng, train)?;
    tape.linear(x, p.var("r.fc.w"), p.var("r.fc.b"))
}

/// Pools `boxes`, given in the unrotated `width x height` frame, from the
/// feature map of the image rotated by `q`. Degenerate boxes are skipped;
/// it is an error when none remain.
pub fn boxcrop<T: Float>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    fmap_rot: Var,
    boxes: &[BBox],
    q: RotationLabel,
    (width, height): (f64, f64),
) -> Result<Var> {
    let rotated: Vec<BBox> = boxes
        .iter()
        .filter(|b| b.is_valid())
        .map(|b| rotate_box(b, q, width, height))
        .collect();
    ensure!(!rotated.is_empty(), "no usable regions to crop");
    let ps = cfg.pool_size;
    roi_pool(tape, fmap_rot, &rotated, cfg.stride() as f64, (ps, ps))
}

/// The whole rotated feature map pooled as one region.
pub fn whole_image<T: Float>(tape: &mut Tape<T>, cfg: &ModelConfig, fmap_rot: Var, (width, height): (f64, f64)) -> Result<Var> {
    boxcrop(
        tape,
        cfg,
        fmap_rot,
        &[BBox::new(0.0, 0.0, width, height)],
        RotationLabel::IDENTITY,
        (width, height),
    )
}

/// Outcome of cropping around pseudo-labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoCrop {
    Regions { pooled: Var, count: usize },
    /// Nothing cleared the score threshold; the caller should use the whole
    /// image instead.
    Fallback,
}

/// Crops the rotated map around the most confident detections of the
/// unrotated image: at most `max_boxes` with score `>= score_thresh`.
#[allow(clippy::too_many_arguments)]
pub fn pseudoboxcrop<T: Float>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    fmap_rot: Var,
    detections: &[Detection],
    q: RotationLabel,
    extent: (f64, f64),
    score_thresh: f64,
    max_boxes: usize,
) -> Result<PseudoCrop> {
    let boxes = pseudo_boxes(detections, score_thresh, max_boxes);
    if boxes.is_empty() {
        return Ok(PseudoCrop::Fallback);
    }
    let pooled = boxcrop(tape, cfg, fmap_rot, &boxes, q, extent)?;
    Ok(PseudoCrop::Regions {
        pooled,
        count: boxes.len(),
    })
}

/// Pseudo-label boxes: best-scoring detections first.
pub fn pseudo_boxes(detections: &[Detection], score_thresh: f64, max_boxes: usize) -> Vec<BBox> {
    let mut sorted: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.score >= score_thresh && d.bbox.is_valid())
        .collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    sorted.into_iter().take(max_boxes).map(|d| d.bbox).collect()
}

/// Mean cross-entropy over every region row of every `(logits, label)` pair.
pub fn rotation_loss<T: Float>(tape: &mut Tape<T>, parts: &[(Var, RotationLabel)]) -> Result<Var> {
    ensure!(!parts.is_empty(), "rotation loss needs at least one region");
    let total: usize = parts.iter().map(|&(l, _)| tape.shape(l)[0]).sum();
    let w = T::from_f64(1.0 / total as f64);
    let mut terms = Vec::with_capacity(parts.len());
    for &(logits, q) in parts {
        ensure!(
            tape.shape(logits).len() == 2 && tape.shape(logits)[1] == 4,
            "rotation logits must be [N,4], got {:?}",
            tape.shape(logits)
        );
        let rows: Vec<_> = (0..tape.shape(logits)[0]).map(|r| (r, q.class_index(), w)).collect();
        terms.push(tape.weighted_cross_entropy(logits, &rows)?);
    }
    tape.add_all(&terms)
}
