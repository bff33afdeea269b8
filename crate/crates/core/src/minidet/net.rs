use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, ModelConfig, ModelParams};
use crate::boxgeom::{assign_anchor_targets, decode_deltas, encode_deltas, gen_anchors, iou, nms, roi_pool, AnchorLabel, BBox};
use crate::diffcore::{softmax, Float, Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::scenes::Annotation;

/// Runs the backbone on a `[3,H,W]` image in `[0,1]`; returns the
/// `[C,H/s,W/s]` feature map.
pub fn backbone_forward<T: Float>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, image: &Tensor<T>) -> Result<Var> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[0] == 3, "backbone expects a [3,H,W] image, got {s:?}");
    let stride = cfg.stride();
    ensure!(
        s[1].is_multiple_of(stride) && s[2].is_multiple_of(stride),
        "image extents {}x{} must be multiples of the feature stride {stride}",
        s[1],
        s[2]
    );
    let half = T::from_f64(0.5);
    let centered = Tensor::new(s.to_vec(), image.data().iter().map(|&v| v - half).collect())?;
    let mut x = tape.constant(centered);
    let blocks = cfg.channels.len();
    for b in 1..=blocks {
        for c in 1..=2 {
            let (w, bias) = (p.var(&format!("f.b{b}.c{c}.w")), p.var(&format!("f.b{b}.c{c}.b")));
            x = tape.conv2d(x, w, bias, 1, 1)?;
            x = tape.relu(x);
        }
        if b < blocks {
            x = tape.max_pool2d(x, 2, 2)?;
        }
    }
    Ok(x)
}

/// RPN proposals in image coordinates, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Proposals {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl Proposals {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `[N,2]` background/foreground logits, one row per anchor.
    pub objectness: Var,
    /// `[N,4]` anchor deltas.
    pub deltas: Var,
    pub anchors: Vec<BBox>,
    pub proposals: Proposals,
}

/// Gather indices turning a `[A*d, H, W]` head output into `[H*W*A, d]` rows
/// ordered like the anchors.
fn head_rows(h: usize, w: usize, a: usize, d: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * a * d);
    for y in 0..h {
        for x in 0..w {
            for k in 0..a {
                for j in 0..d {
                    index.push(((k * d + j) * h + y) * w + x);
                }
            }
        }
    }
    index
}

pub fn rpn_forward<T: Float>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    fmap: Var,
    image_hw: (usize, usize),
) -> Result<RpnOutput> {
    let s = tape.shape(fmap).to_vec();
    ensure!(s.len() == 3, "RPN expects a [C,H,W] feature map, got {s:?}");
    let (hf, wf) = (s[1], s[2]);
    let hidden = tape.conv2d(fmap, p.var("d.rpn.conv.w"), p.var("d.rpn.conv.b"), 1, 1)?;
    let hidden = tape.relu(hidden);
    let obj = tape.conv2d(hidden, p.var("d.rpn.obj.w"), p.var("d.rpn.obj.b"), 1, 0)?;
    let del = tape.conv2d(hidden, p.var("d.rpn.delta.w"), p.var("d.rpn.delta.b"), 1, 0)?;
    let a = cfg.anchors_per_cell();
    let n = hf * wf * a;
    let objectness = tape.gather(obj, head_rows(hf, wf, a, 2), vec![n, 2])?;
    let deltas = tape.gather(del, head_rows(hf, wf, a, 4), vec![n, 4])?;
    let anchors: Vec<BBox> = gen_anchors(hf, wf, cfg.stride(), &cfg.anchor_scales, &cfg.anchor_ratios)?
        .into_iter()
        .map(|a| a.bbox)
        .collect();
    let proposals = propose(tape.value(objectness), tape.value(deltas), &anchors, image_hw, cfg)?;
    Ok(RpnOutput {
        objectness,
        deltas,
        anchors,
        proposals,
    })
}

fn propose<T: Float>(
    obj: &Tensor<T>,
    del: &Tensor<T>,
    anchors: &[BBox],
    (h, w): (usize, usize),
    cfg: &ModelConfig,
) -> Result<Proposals> {
    let scores: Vec<f64> = obj
        .data()
        .chunks(2)
        .map(|l| 1.0 / (1.0 + (l[0].as_f64() - l[1].as_f64()).exp()))
        .collect();
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(cfg.pre_nms_top_n);
    let mut boxes = Vec::with_capacity(order.len());
    let mut kept_scores = Vec::with_capacity(order.len());
    for i in order {
        let d = &del.data()[i * 4..i * 4 + 4];
        let d = [d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()];
        if !d.iter().all(|v| v.is_finite()) {
            continue;
        }
        let b = decode_deltas(&d, &anchors[i])?.clip(w as f64, h as f64);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            boxes.push(b);
            kept_scores.push(scores[i]);
        }
    }
    let keep = nms(&boxes, &kept_scores, cfg.proposal_nms);
    let keep = &keep[..keep.len().min(cfg.post_nms_top_n)];
    Ok(Proposals {
        boxes: keep.iter().map(|&i| boxes[i]).collect(),
        scores: keep.iter().map(|&i| kept_scores[i]).collect(),
    })
}

/// Pools every ROI from `fmap` and returns `([N,K+1] class logits, [N,4]
/// scaled deltas)`, or `None` for an empty ROI list.
pub fn roi_head_forward<T: Float>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    fmap: Var,
    rois: &[BBox],
) -> Result<Option<(Var, Var)>> {
    if rois.is_empty() {
        return Ok(None);
    }
    let ps = cfg.pool_size;
    let pooled = roi_pool(tape, fmap, rois, cfg.stride() as f64, (ps, ps))?;
    let c = tape.shape(pooled)[1];
    let x = tape.reshape(pooled, vec![rois.len(), c * ps * ps])?;
    let x = tape.linear(x, p.var("d.roi.fc1.w"), p.var("d.roi.fc1.b"))?;
    let x = tape.relu(x);
    let x = tape.linear(x, p.var("d.roi.fc2.w"), p.var("d.roi.fc2.b"))?;
    let x = tape.relu(x);
    let cls = tape.linear(x, p.var("d.roi.cls.w"), p.var("d.roi.cls.b"))?;
    let del = tape.linear(x, p.var("d.roi.delta.w"), p.var("d.roi.delta.b"))?;
    Ok(Some((cls, del)))
}

/// Detection objective for one image plus its parts (each already
/// normalized by its own sample count).
#[derive(Debug, Clone)]
pub struct DetectionLoss {
    pub total: Var,
    /// `[rpn_cls, rpn_reg, roi_cls, roi_reg]` as tape nodes.
    pub terms: [Var; 4],
    pub fmap: Var,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

fn sample_split<R: Rng + ?Sized>(
    mut fg: Vec<usize>,
    mut bg: Vec<usize>,
    batch: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    fg.shuffle(rng);
    fg.truncate((batch as f64 * fg_fraction).floor() as usize);
    bg.shuffle(rng);
    bg.truncate(batch - fg.len());
    (fg, bg)
}

/// Builds the detection loss on `tape`: RPN objectness and box regression
/// over a sampled anchor batch, then ROI classification and box regression
/// over sampled proposals (ground truths included). Proposals are treated as
/// constants.
pub fn detection_loss<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    annotations: &[Annotation],
    rng: &mut R,
) -> Result<DetectionLoss> {
    detection_loss_impl(tape, p, cfg, image, annotations, None, rng)
}

/// [`detection_loss`] with the second stage fed `proposals` instead of the
/// RPN's own.
pub fn detection_loss_with_proposals<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    annotations: &[Annotation],
    proposals: &[BBox],
    rng: &mut R,
) -> Result<DetectionLoss> {
    detection_loss_impl(tape, p, cfg, image, annotations, Some(proposals), rng)
}

fn detection_loss_impl<T: Float, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    annotations: &[Annotation],
    proposals: Option<&[BBox]>,
    rng: &mut R,
) -> Result<DetectionLoss> {
    for a in annotations {
        ensure!(
            a.class < cfg.num_classes,
            "annotation class {} out of range for {} classes",
            a.class,
            cfg.num_classes
        );
        ensure!(a.bbox.is_valid(), "annotation box is not valid: {:?}", a.bbox);
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let fmap = backbone_forward(tape, p, cfg, image)?;
    let rpn = rpn_forward(tape, p, cfg, fmap, (h, w))?;
    let gts: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
    let zero = |tape: &mut Tape<T>| tape.constant(Tensor::scalar(T::zero()));

    let targets = assign_anchor_targets(&rpn.anchors, &gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou)?;
    let (fg, bg) = sample_split(
        targets.foreground().collect(),
        targets.background().collect(),
        cfg.rpn_batch,
        cfg.rpn_fg_fraction,
        rng,
    );
    let rpn_cls = if fg.is_empty() && bg.is_empty() {
        zero(tape)
    } else {
        let wt = T::from_f64(1.0 / (fg.len() + bg.len()) as f64);
        let rows: Vec<_> = fg.iter().map(|&i| (i, 1, wt)).chain(bg.iter().map(|&i| (i, 0, wt))).collect();
        tape.weighted_cross_entropy(rpn.objectness, &rows)?
    };
    let n_anchors = rpn.anchors.len();
    let mut target = vec![T::zero(); n_anchors * 4];
    let mut weight = vec![T::zero(); n_anchors * 4];
    for &i in &fg {
        if let AnchorLabel::Foreground { deltas, .. } = targets.labels[i] {
            for j in 0..4 {
                target[i * 4 + j] = T::from_f64(deltas[j]);
                weight[i * 4 + j] = T::from_f64(1.0 / fg.len() as f64);
            }
        }
    }
    let rpn_reg = tape.weighted_smooth_l1(rpn.deltas, &target, &weight)?;

    let mut rois = proposals.map_or_else(|| rpn.proposals.boxes.clone(), <[BBox]>::to_vec);
    rois.extend(gts.iter().copied());
    let mut labels = Vec::with_capacity(rois.len());
    let (mut fg_rois, mut bg_rois) = (Vec::new(), Vec::new());
    for (ri, r) in rois.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .map(|(gi, g)| (iou(r, g), gi))
            .fold(None, |acc: Option<(f64, usize)>, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((v, gi)) if v >= cfg.roi_fg_iou => {
                labels.push(Some(gi));
                fg_rois.push(ri);
            }
            _ => {
                labels.push(None);
                bg_rois.push(ri);
            }
        }
    }
    let (fg_rois, bg_rois) = sample_split(fg_rois, bg_rois, cfg.roi_batch, cfg.roi_fg_fraction, rng);
    let sampled: Vec<usize> = fg_rois.iter().chain(&bg_rois).copied().collect();
    let sampled_boxes: Vec<BBox> = sampled.iter().map(|&i| rois[i]).collect();
    let (roi_cls, roi_reg) = match roi_head_forward(tape, p, cfg, fmap, &sampled_boxes)? {
        None => (zero(tape), zero(tape)),
        Some((cls, del)) => {
            let wt = T::from_f64(1.0 / sampled.len() as f64);
            let rows: Vec<_> = sampled
                .iter()
                .enumerate()
                .map(|(row, &ri)| match labels[ri] {
                    Some(gi) => (row, annotations[gi].class, wt),
                    None => (row, cfg.num_classes, wt),
                })
                .collect();
            let cls_loss = tape.weighted_cross_entropy(cls, &rows)?;
            let mut target = vec![T::zero(); sampled.len() * 4];
            let mut weight = vec![T::zero(); sampled.len() * 4];
            for (row, &ri) in sampled.iter().enumerate().take(fg_rois.len()) {
                let gi = labels[ri].expect("foreground rows carry a ground truth");
                let d = encode_deltas(&gts[gi], &rois[ri])?;
                for j in 0..4 {
                    target[row * 4 + j] = T::from_f64(d[j] * cfg.box_weights[j]);
                    weight[row * 4 + j] = T::from_f64(1.0 / fg_rois.len() as f64);
                }
            }
            (cls_loss, tape.weighted_smooth_l1(del, &target, &weight)?)
        }
    };

    let parts = [rpn_cls, rpn_reg, roi_cls, roi_reg].map(|v| tape.value(v).data()[0].as_f64());
    let total = tape.add_all(&[rpn_cls, rpn_reg, roi_cls, roi_reg])?;
    Ok(DetectionLoss {
        total,
        terms: [rpn_cls, rpn_reg, roi_cls, roi_reg],
        fmap,
        rpn_cls: parts[0],
        rpn_reg: parts[1],
        roi_cls: parts[2],
        roi_reg: parts[3],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_thresh: f64,
    /// Per-class NMS IoU threshold.
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_thresh: 0.5,
            nms_thresh: 0.3,
            max_detections: 20,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.score_thresh), "score threshold must lie in [0,1]");
        ensure!((0.0..=1.0).contains(&self.nms_thresh), "NMS threshold must lie in [0,1]");
        Ok(())
    }
}

/// Inference: proposals, ROI scoring, per-class NMS. Detections come back
/// best first.
pub fn detect<T: Float>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    dc: &DetectConfig,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let fmap = backbone_forward(&mut tape, &p, cfg, image)?;
    let rpn = rpn_forward(&mut tape, &p, cfg, fmap, (h, w))?;
    let Some((cls, del)) = roi_head_forward(&mut tape, &p, cfg, fmap, &rpn.proposals.boxes)? else {
        return Ok(Vec::new());
    };
    let k = cfg.num_classes + 1;
    let logits = tape.value(cls).data();
    let deltas = tape.value(del).data();
    let mut per_class: Vec<(Vec<BBox>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); cfg.num_classes];
    for (i, proposal) in rpn.proposals.boxes.iter().enumerate() {
        let row: Vec<f64> = logits[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
        let probs = softmax(&row);
        let mut d = [0.0; 4];
        for j in 0..4 {
            d[j] = deltas[i * 4 + j].as_f64() / cfg.box_weights[j];
        }
        if !d.iter().all(|v| v.is_finite()) {
            continue;
        }
        let b = decode_deltas(&d, proposal)?.clip(w as f64, h as f64);
        if !b.is_valid() {
            continue;
        }
        for (c, &pc) in probs[..cfg.num_classes].iter().enumerate() {
            if pc >= dc.score_thresh {
                per_class[c].0.push(b);
                per_class[c].1.push(pc);
            }
        }
    }
    let mut out = Vec::new();
    for (c, (boxes, scores)) in per_class.iter().enumerate() {
        for i in nms(boxes, scores, dc.nms_thresh) {
            out.push(Detection {
                class: c,
                score: scores[i],
                bbox: boxes[i],
            });
        }
    }
    // stable: equal scores keep class order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(dc.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{derive_rng, Stream};

    fn zeroed() -> ModelParams<f32> {
        let mut p = ModelParams::init(&ModelConfig::default(), &mut derive_rng(0, Stream::Init, 0));
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    fn image(v: f32) -> Tensor<f32> {
        Tensor::full(vec![3, 128, 128], v)
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = ModelConfig::default();
        let mut tape = Tape::new();
        let p = zeroed().bind(&mut tape, |_| false);
        let f = backbone_forward(&mut tape, &p, &cfg, &image(0.7)).unwrap();
        assert_eq!(tape.shape(f), &[64, 16, 16]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_rejects_bad_extents() {
        let cfg = ModelConfig::default();
        let mut tape = Tape::new();
        let p = zeroed().bind(&mut tape, |_| false);
        assert!(backbone_forward(&mut tape, &p, &cfg, &Tensor::zeros(vec![3, 100, 128])).is_err());
        assert!(backbone_forward(&mut tape, &p, &cfg, &Tensor::zeros(vec![1, 128, 128])).is_err());
    }

    #[test]
    fn equal_logits_keep_anchor_order() {
        let cfg = ModelConfig::default();
        let mut tape = Tape::new();
        let p = zeroed().bind(&mut tape, |_| false);
        let f = backbone_forward(&mut tape, &p, &cfg, &image(0.2)).unwrap();
        let rpn = rpn_forward(&mut tape, &p, &cfg, f, (128, 128)).unwrap();
        assert_eq!(tape.shape(rpn.objectness), &[16 * 16 * 9, 2]);
        assert!(!rpn.proposals.is_empty() && rpn.proposals.len() <= cfg.post_nms_top_n);
        // zero deltas: proposals are clipped anchors, the first one is anchor 0
        assert_eq!(rpn.proposals.boxes[0], rpn.anchors[0].clip(128.0, 128.0));
        assert!(rpn.proposals.scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn empty_roi_list_is_empty_output() {
        let cfg = ModelConfig::default();
        let mut tape = Tape::new();
        let p = zeroed().bind(&mut tape, |_| false);
        let f = backbone_forward(&mut tape, &p, &cfg, &image(0.2)).unwrap();
        assert!(roi_head_forward(&mut tape, &p, &cfg, f, &[]).unwrap().is_none());
    }

    #[test]
    fn no_annotations_means_no_regression_loss() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut derive_rng(3, Stream::Init, 0));
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| true);
        let loss = detection_loss(&mut tape, &p, &cfg, &image(0.4), &[], &mut derive_rng(3, Stream::Sampling, 0)).unwrap();
        assert_eq!(loss.rpn_reg, 0.0);
        assert_eq!(loss.roi_reg, 0.0);
        assert!(loss.rpn_cls > 0.0 && loss.roi_cls > 0.0);
    }

    #[test]
    fn detection_loss_rejects_bad_class() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut derive_rng(3, Stream::Init, 0));
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| true);
        let ann = Annotation {
            class: 9,
            bbox: BBox::new(10.0, 10.0, 40.0, 40.0),
        };
        let r = detection_loss(&mut tape, &p, &cfg, &image(0.4), &[ann], &mut derive_rng(3, Stream::Sampling, 0));
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn detect_is_deterministic_and_bounded() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut derive_rng(5, Stream::Init, 0));
        let dc = DetectConfig {
            score_thresh: 0.0,
            ..DetectConfig::default()
        };
        let a = detect(&params, &cfg, &image(0.3), &dc).unwrap();
        let b = detect(&params, &cfg, &image(0.3), &dc).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= dc.max_detections);
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        // a fresh model is unsure: every foreground probability is near 1/6
        assert!(detect(&params, &cfg, &image(0.3), &DetectConfig::default()).unwrap().is_empty());
    }
}
