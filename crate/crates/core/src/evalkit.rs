//! Detection metrics and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::iou;
use crate::error::{ensure, Error, Result};
use crate::minidet::{DetectConfig, Detection, ModelConfig, ModelParams};
use crate::pipeline::{evaluate_stream_gammas, AdaptConfig};
use crate::scenes::{Annotation, ImageSample};

/// Area under the monotone precision envelope of a ranked list, where
/// `tp[i]` says whether the `i`-th most confident detection was a true
/// positive and `n_gt` counts the ground truths.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len() + 2);
    let mut precision = Vec::with_capacity(tp.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have ground truth; 0 when none do.
    #[serde(rename = "mAP")]
    pub map: f64,
}

fn check_inputs(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], num_classes: usize) -> Result<()> {
    ensure!(
        dets.len() == gts.len(),
        "{} detection lists for {} images",
        dets.len(),
        gts.len()
    );
    for d in dets.iter().flatten() {
        ensure!(d.class < num_classes, "detection class {} out of range", d.class);
    }
    for g in gts.iter().flatten() {
        ensure!(g.class < num_classes, "ground-truth class {} out of range", g.class);
    }
    Ok(())
}

/// Per-class average precision with all-point interpolation. Detections are
/// taken by descending score (ties keep image then list order); each matches
/// the unmatched same-class ground truth of its image with the highest IoU,
/// provided that IoU reaches `iou_thresh`.
pub fn voc_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], num_classes: usize, iou_thresh: f64) -> Result<ApResult> {
    check_inputs(dets, gts, num_classes)?;
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let n_gt = gts.iter().flatten().filter(|g| g.class == c).count();
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, &Detection)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == c).map(move |d| (img, d)))
            .collect();
        ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let tp: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let best = gts[img]
                    .iter()
                    .enumerate()
                    .filter(|&(gi, g)| g.class == c && !matched[img][gi])
                    .map(|(gi, g)| (iou(&d.bbox, &g.bbox), gi))
                    .filter(|&(v, _)| v >= iou_thresh)
                    .fold(None, |acc: Option<(f64, usize)>, x| match acc {
                        Some(a) if a.0 >= x.0 => Some(a),
                        _ => Some(x),
                    });
                match best {
                    Some((_, gi)) => {
                        matched[img][gi] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.push(Some(ap_from_ranked(&tp, n_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(ApResult { per_class, map })
}

/// Breakdown of the most confident detections by what they hit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    /// IoU >= 0.5 with a ground truth of the same class.
    pub correct: usize,
    /// Best same-class IoU in [0.3, 0.5).
    pub mislocalized: usize,
    /// Best same-class IoU below 0.3.
    pub background: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.correct + self.mislocalized + self.background
    }
}

pub const CORRECT_IOU: f64 = 0.5;
pub const MISLOCALIZED_IOU: f64 = 0.3;

/// Classifies the `top_k` highest-scoring detections across all images.
pub fn error_analysis(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], top_k: usize) -> Result<ErrorCounts> {
    ensure!(
        dets.len() == gts.len(),
        "{} detection lists for {} images",
        dets.len(),
        gts.len()
    );
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut counts = ErrorCounts::default();
    for &(img, d) in ranked.iter().take(top_k) {
        let best = gts[img]
            .iter()
            .filter(|g| g.class == d.class)
            .map(|g| iou(&d.bbox, &g.bbox))
            .fold(0.0, f64::max);
        if best >= CORRECT_IOU {
            counts.correct += 1;
        } else if best >= MISLOCALIZED_IOU {
            counts.mislocalized += 1;
        } else {
            counts.background += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: i64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// mAP over `data` for each adaptation length in `gammas`.
#[allow(clippy::too_many_arguments)]
pub fn gamma_sweep(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    adapt: &AdaptConfig,
    dc: &DetectConfig,
    data: &[ImageSample],
    gammas: &[i64],
    iou_thresh: f64,
    jobs: usize,
) -> Result<Vec<GammaPoint>> {
    let gts: Vec<Vec<Annotation>> = data.iter().map(|s| s.annotations.clone()).collect();
    let per_gamma = evaluate_stream_gammas(params, model, adapt, dc, data, gammas, jobs)?;
    gammas
        .iter()
        .zip(per_gamma)
        .map(|(&gamma, dets)| {
            let ap = voc_ap(&dets, &gts, model.num_classes, iou_thresh)?;
            Ok(GammaPoint { gamma, map: ap.map })
        })
        .collect()
}

/// Everything an evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub ap: ApResult,
    pub errors: Option<ErrorCounts>,
    pub gamma_curve: Vec<GammaPoint>,
    pub detections: Vec<Vec<Detection>>,
}

/// Writes `report.json`, `ap.csv`, `errors.csv` (when error counts are
/// present), and `gamma.csv` (when a curve is present) into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    ensure!(
        report.class_names.len() == report.ap.per_class.len(),
        "{} class names for {} AP entries",
        report.class_names.len(),
        report.ap.per_class.len()
    );
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("report.json", serde_json::to_string_pretty(report).expect("report serializes") + "\n")?;

    let mut ap = String::from("class,AP\n");
    for (name, v) in report.class_names.iter().zip(&report.ap.per_class) {
        match v {
            Some(v) => writeln!(ap, "{name},{v}"),
            None => writeln!(ap, "{name},"),
        }
        .expect("string write");
    }
    writeln!(ap, "mAP,{}", report.ap.map).expect("string write");
    write("ap.csv", ap)?;

    if let Some(e) = report.errors {
        write(
            "errors.csv",
            format!(
                "type,count\ncorrect,{}\nmislocalized,{}\nbackground,{}\n",
                e.correct, e.mislocalized, e.background
            ),
        )?;
    }
    if !report.gamma_curve.is_empty() {
        let mut g = String::from("gamma,mAP\n");
        for p in &report.gamma_curve {
            writeln!(g, "{},{}", p.gamma, p.map).expect("string write");
        }
        write("gamma.csv", g)?;
    }
    Ok(())
}
