//! Box algebra and everything spatial the detector and the rotation task
//! share: IoU, quarter-turn rotations of images and boxes, anchors, delta
//! encoding, anchor target assignment, NMS, and ROI max pooling.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner,
//! `x` to the right and `y` downward. A pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Float, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Axis-aligned box `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.is_valid() && self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clamps all coordinates into `[0, width] x [0, height]`. The result may
    /// be degenerate when the box lies outside.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A quarter-turn orientation `q` in `1..=4`, meaning a counter-clockwise
/// rotation by `q * 90` degrees; `q = 4` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub const IDENTITY: RotationLabel = RotationLabel(4);
    pub const ALL: [RotationLabel; 4] = [RotationLabel(1), RotationLabel(2), RotationLabel(3), RotationLabel(4)];

    pub fn new(q: u8) -> Result<Self> {
        ensure!((1..=4).contains(&q), "rotation label {q} outside 1..=4");
        Ok(RotationLabel(q))
    }

    pub fn q(self) -> u8 {
        self.0
    }

    /// Classifier target index `q - 1`.
    pub fn class_index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    /// The rotation that undoes this one.
    pub fn inverse(self) -> RotationLabel {
        RotationLabel(if self.0 == 4 { 4 } else { 4 - self.0 })
    }

    fn quarter_turns(self) -> u8 {
        self.0 % 4
    }

    /// Extents `(width, height)` after rotating a `width x height` frame.
    pub fn rotated_extent(self, width: f64, height: f64) -> (f64, f64) {
        if self.quarter_turns() % 2 == 1 {
            (height, width)
        } else {
            (width, height)
        }
    }
}

/// Rotates a `[C,H,W]` image counter-clockwise by `q * 90` degrees.
///
/// Under one quarter turn pixel `(x, y)` lands at `(y, W-1-x)` and the
/// output is `[C,W,H]`.
pub fn rotate_image<T: Float>(img: &Tensor<T>, q: RotationLabel) -> Result<Tensor<T>> {
    let s = img.shape();
    ensure!(s.len() == 3, "rotate_image expects [C,H,W], got {s:?}");
    let (c, h, w) = (s[0], s[1], s[2]);
    let turns = q.quarter_turns();
    if turns == 0 {
        return Ok(img.clone());
    }
    let (ho, wo) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let src = img.data();
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = match turns {
                    1 => (y, w - 1 - x),
                    2 => (w - 1 - x, h - 1 - y),
                    _ => (h - 1 - y, x),
                };
                dst[ny * wo + nx] = plane[y * w + x];
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Maps a box in a `width x height` frame into the frame rotated
/// counter-clockwise by `q * 90` degrees. One quarter turn sends the
/// continuous point `(x, y)` to `(y, width - x)`.
pub fn rotate_box(b: &BBox, q: RotationLabel, width: f64, height: f64) -> BBox {
    match q.quarter_turns() {
        0 => *b,
        1 => BBox::new(b.y1, width - b.x2, b.y2, width - b.x1),
        2 => BBox::new(width - b.x2, height - b.y2, width - b.x1, height - b.y1),
        _ => BBox::new(height - b.y2, b.x1, height - b.y1, b.x2),
    }
}

/// Greedy non-maximum suppression. Returns kept indices ordered by
/// descending score (ties by lower index); every kept pair has
/// IoU <= `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// A reference box tiled over the feature grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub scale: f64,
    pub ratio: f64,
    /// Feature-map cell `(row, col)`.
    pub cell: (usize, usize),
}

/// One anchor per (cell, scale, ratio), cells in row-major order and
/// ratios varying fastest. `ratio` is width over height.
pub fn gen_anchors(fmap_h: usize, fmap_w: usize, stride: usize, scales: &[f64], ratios: &[f64]) -> Result<Vec<Anchor>> {
    ensure!(stride >= 1, "anchor stride must be at least 1");
    let s = stride as f64;
    let mut out = Vec::with_capacity(fmap_h * fmap_w * scales.len() * ratios.len());
    for row in 0..fmap_h {
        for col in 0..fmap_w {
            let cx = col as f64 * s + s / 2.0;
            let cy = row as f64 * s + s / 2.0;
            for &scale in scales {
                for &ratio in ratios {
                    let r = ratio.sqrt();
                    out.push(Anchor {
                        bbox: BBox::from_center(cx, cy, scale * r, scale / r),
                        scale,
                        ratio,
                        cell: (row, col),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Largest log-scale delta accepted by [`decode_deltas`]; keeps `exp` finite
/// for wild predictions.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Regression targets `(tx, ty, tw, th)` taking `anchor` to `gt`.
pub fn encode_deltas(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    ensure!(
        gt.width() > 0.0 && gt.height() > 0.0 && anchor.width() > 0.0 && anchor.height() > 0.0,
        "delta encoding needs positive extents, got {gt:?} and {anchor:?}"
    );
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    Ok([
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ])
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(deltas: &[f64; 4], anchor: &BBox) -> Result<BBox> {
    ensure!(
        anchor.width() > 0.0 && anchor.height() > 0.0,
        "delta decoding needs a positive-extent anchor, got {anchor:?}"
    );
    let (ax, ay) = anchor.center();
    let cx = ax + deltas[0] * anchor.width();
    let cy = ay + deltas[1] * anchor.height();
    let w = anchor.width() * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.height() * deltas[3].min(MAX_LOG_SCALE).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// Training label of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Foreground { gt: usize, deltas: [f64; 4] },
    Background,
    Ignore,
}

impl AnchorLabel {
    pub fn is_foreground(&self) -> bool {
        matches!(self, AnchorLabel::Foreground { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
}

impl AnchorTargets {
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| l.is_foreground()).map(|(i, _)| i)
    }

    pub fn background(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, AnchorLabel::Background))
            .map(|(i, _)| i)
    }
}

/// Labels anchors by their best IoU with any ground-truth box: `>= pos_thr`
/// is foreground, `<= neg_thr` background, anything between is ignored.
/// Each ground truth additionally claims its single best anchor.
pub fn assign_anchor_targets(anchors: &[BBox], gts: &[BBox], pos_thr: f64, neg_thr: f64) -> Result<AnchorTargets> {
    ensure!(pos_thr > neg_thr, "positive threshold {pos_thr} must exceed negative threshold {neg_thr}");
    let mut best: Vec<(f64, usize)> = vec![(0.0, 0); anchors.len()];
    let mut claim: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best[ai].0 {
                best[ai] = (v, gi);
            }
            if v > claim[gi].0 {
                claim[gi] = (v, Some(ai));
            }
        }
    }
    let mut labels = Vec::with_capacity(anchors.len());
    for (a, &(v, gi)) in anchors.iter().zip(&best) {
        let label = if !gts.is_empty() && v >= pos_thr {
            AnchorLabel::Foreground {
                gt: gi,
                deltas: encode_deltas(&gts[gi], a)?,
            }
        } else if v <= neg_thr {
            AnchorLabel::Background
        } else {
            AnchorLabel::Ignore
        };
        labels.push(label);
    }
    for (gi, &(_, ai)) in claim.iter().enumerate() {
        if let Some(ai) = ai {
            if !labels[ai].is_foreground() {
                labels[ai] = AnchorLabel::Foreground {
                    gt: gi,
                    deltas: encode_deltas(&gts[gi], &anchors[ai])?,
                };
            }
        }
    }
    Ok(AnchorTargets { labels })
}

/// Integer feature-map window `(row0, row1, col0, col1)` (half-open) covered
/// by an image-space box: floor on the leading edge, ceil on the trailing
/// edge, clipped to the map.
pub fn roi_window(b: &BBox, stride: f64, fmap_h: usize, fmap_w: usize) -> Result<(usize, usize, usize, usize)> {
    ensure!(b.is_valid(), "ROI box is not valid: {b:?}");
    let span = |lo: f64, hi: f64, extent: usize| -> (i64, i64) {
        let a = ((lo / stride).floor() as i64).max(0);
        let z = ((hi / stride).ceil() as i64).min(extent as i64);
        (a, z)
    };
    let (r0, r1) = span(b.y1, b.y2, fmap_h);
    let (c0, c1) = span(b.x1, b.x2, fmap_w);
    if r1 <= r0 || c1 <= c0 {
        return Err(Error::contract(format!(
            "ROI {b:?} falls outside the {fmap_h}x{fmap_w} feature map at stride {stride}"
        )));
    }
    Ok((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
}

/// Bin `j` of `bins` over a window of `len` cells: `[floor(j*len/bins), ceil((j+1)*len/bins))`.
/// Never empty for `len >= 1`.
fn bin_span(j: usize, bins: usize, len: usize) -> (usize, usize) {
    let lo = j * len / bins;
    let hi = ((j + 1) * len).div_ceil(bins);
    (lo, hi.max(lo + 1))
}

/// Flat argmax indices into a `[C,Hf,Wf]` map for one ROI pooled to
/// `[C,ph,pw]`.
pub fn roi_pool_indices<T: Float>(fmap: &Tensor<T>, b: &BBox, stride: f64, out: (usize, usize)) -> Result<Vec<usize>> {
    let s = fmap.shape();
    ensure!(s.len() == 3, "ROI pooling expects a [C,H,W] map, got {s:?}");
    let (c, hf, wf) = (s[0], s[1], s[2]);
    let (ph, pw) = out;
    ensure!(ph >= 1 && pw >= 1, "ROI output must be at least 1x1");
    let (r0, r1, c0, c1) = roi_window(b, stride, hf, wf)?;
    let (rh, rw) = (r1 - r0, c1 - c0);
    let data = fmap.data();
    let mut index = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let base = ch * hf * wf;
        for by in 0..ph {
            let (y0, y1) = bin_span(by, ph, rh);
            for bx in 0..pw {
                let (x0, x1) = bin_span(bx, pw, rw);
                let mut best = base + (r0 + y0) * wf + c0 + x0;
                for y in r0 + y0..r0 + y1 {
                    for x in c0 + x0..c0 + x1 {
                        let i = base + y * wf + x;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                index.push(best);
            }
        }
    }
    Ok(index)
}

/// Max-pools each image-space box from `fmap: [C,Hf,Wf]` into a fixed
/// `[N,C,ph,pw]` tensor, differentiably.
pub fn roi_pool<T: Float>(tape: &mut Tape<T>, fmap: Var, boxes: &[BBox], stride: f64, out: (usize, usize)) -> Result<Var> {
    ensure!(!boxes.is_empty(), "ROI pooling needs at least one box");
    let c = tape.shape(fmap)[0];
    let mut index = Vec::with_capacity(boxes.len() * c * out.0 * out.1);
    for b in boxes {
        index.extend(roi_pool_indices(tape.value(fmap), b, stride, out)?);
    }
    tape.gather(fmap, index, vec![boxes.len(), c, out.0, out.1])
}
