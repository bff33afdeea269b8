//! Finite-difference checks of every differentiable op and of the two
//! composite objectives, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxgeom::{roi_pool, rotate_image, BBox, RotationLabel};
use crate::diffcore::{finite_diff_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::minidet::{backbone_forward, detection_loss_with_proposals, rpn_forward, Bound, ModelConfig, ModelParams};
use crate::rotsup::{boxcrop, rotation_head_forward, rotation_loss};
use crate::scenes::{scene_at, Annotation, StyleKind, StyleMix, IMAGE_SIZE};
use crate::seeding::{derive_rng, Stream};

/// Largest relative error a case may show.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < GRAD_TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("positive shape")
}

/// Values at least `gap` away from zero, for inputs that pass through kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Pseudo-random weights so every output depends on every input.
fn mix(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = tape.value(x).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &[1, n], 1.0);
    let w = tape.constant(w);
    let b = tape.constant(Tensor::zeros(vec![1]));
    let flat = tape.reshape(x, vec![n])?;
    let y = tape.linear(flat, w, b)?;
    Ok(tape.sum(y))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        channels: vec![3, 4, 4, 4],
        rpn_channels: 4,
        roi_hidden: 6,
        ..ModelConfig::default()
    }
}

const SMALL: usize = 32;

/// A rendered scene box-filtered down to `SMALL x SMALL`, with its
/// annotations scaled to match. Fewer units make it unlikely that a probe
/// straddles a ReLU or max-pool switch.
fn small_scene() -> (Tensor<f64>, Vec<Annotation>) {
    let sample = scene_at(3, 7, &StyleMix::single(StyleKind::Plain));
    let f = IMAGE_SIZE / SMALL;
    let src = sample.image.data();
    let mut out = vec![0.0; 3 * SMALL * SMALL];
    for c in 0..3 {
        for y in 0..SMALL {
            for x in 0..SMALL {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += src[(c * IMAGE_SIZE + y * f + dy) * IMAGE_SIZE + x * f + dx] as f64;
                    }
                }
                out[(c * SMALL + y) * SMALL + x] = acc / (f * f) as f64;
            }
        }
    }
    let s = 1.0 / f as f64;
    let annotations = sample
        .annotations
        .iter()
        .map(|a| Annotation {
            class: a.class,
            bbox: BBox::new(a.bbox.x1 * s, a.bbox.y1 * s, a.bbox.x2 * s, a.bbox.y2 * s),
        })
        .collect();
    (Tensor::new(vec![3, SMALL, SMALL], out).expect("shape"), annotations)
}

/// A small model with weights large enough that no gradient is negligible.
fn composite_inputs(cfg: &ModelConfig) -> (Vec<String>, Vec<Tensor<f64>>) {
    let params = ModelParams::init(cfg, &mut derive_rng(11, Stream::Init, 0)).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    params
        .iter()
        .map(|(name, t)| (name.to_string(), randn(&mut rng, t.shape(), 0.3)))
        .unzip()
}

fn bind(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Runs every case. Each returns its worst relative error over the probed
/// coordinates.
pub fn run_gradient_suite() -> Result<Vec<GradCase>> {
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = Vec::new();
    let mut push = |name, report| cases.push(GradCase { name, report });

    let x = randn(&mut rng, &[2, 6, 5], 1.0);
    let w = randn(&mut rng, &[3, 2, 3, 3], 0.5);
    let b = randn(&mut rng, &[3], 0.5);
    push(
        "conv2d stride 1 pad 1",
        finite_diff_check(|t, v| { let y = t.conv2d(v[0], v[1], v[2], 1, 1)?; mix(t, y, 1) }, &[x.clone(), w.clone(), b.clone()], &opts)?,
    );
    push(
        "conv2d stride 2 pad 0",
        finite_diff_check(|t, v| { let y = t.conv2d(v[0], v[1], v[2], 2, 0)?; mix(t, y, 2) }, &[x, w, b], &opts)?,
    );

    let x = away_from_zero(&mut rng, &[3, 4, 4], 0.05);
    push("relu", finite_diff_check(|t, v| { let y = t.relu(v[0]); mix(t, y, 3) }, &[x], &opts)?);

    // distinct values: a permutation of a spread grid, so no window has a near tie
    let mut vals: Vec<f64> = (0..2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut rng);
    let x = Tensor::new(vec![2, 6, 6], vals).expect("shape");
    push(
        "max_pool2d",
        finite_diff_check(|t, v| { let y = t.max_pool2d(v[0], 2, 2)?; mix(t, y, 4) }, std::slice::from_ref(&x), &opts)?,
    );
    push(
        "roi_pool",
        finite_diff_check(
            |t, v| {
                let boxes = [BBox::new(3.0, 2.0, 20.0, 17.0), BBox::new(0.0, 0.0, 48.0, 48.0)];
                let y = roi_pool(t, v[0], &boxes, 8.0, (2, 2))?;
                mix(t, y, 5)
            },
            &[x],
            &opts,
        )?,
    );

    let x = randn(&mut rng, &[3, 5], 1.0);
    push(
        "gather",
        finite_diff_check(|t, v| { let y = t.gather(v[0], vec![4, 0, 0, 14, 7, 7, 2], vec![7])?; mix(t, y, 6) }, &[x], &opts)?,
    );

    let x = randn(&mut rng, &[4, 6], 1.0);
    let w = randn(&mut rng, &[3, 6], 0.5);
    let b = randn(&mut rng, &[3], 0.5);
    push(
        "linear",
        finite_diff_check(|t, v| { let y = t.linear(v[0], v[1], v[2])?; mix(t, y, 7) }, &[x.clone(), w.clone(), b.clone()], &opts)?,
    );
    let xv = randn(&mut rng, &[6], 1.0);
    push(
        "linear (vector input)",
        finite_diff_check(|t, v| { let y = t.linear(v[0], v[1], v[2])?; mix(t, y, 8) }, &[xv, w, b], &opts)?,
    );

    let logits = randn(&mut rng, &[4, 5], 1.5);
    push(
        "weighted cross-entropy",
        finite_diff_check(|t, v| t.weighted_cross_entropy(v[0], &[(0, 2, 0.5), (1, 4, 1.0), (3, 0, 0.25), (1, 1, 2.0)]), &[logits], &opts)?,
    );

    // differences kept away from the |d| = 1 seam
    let pred = Tensor::from_f64_slice(vec![6], &[0.3, -0.6, 1.8, -2.5, 0.05, 3.0]).expect("shape");
    let target = [0.0, 0.1, 0.2, 0.0, 0.5, 1.0];
    let weight = [1.0, 0.5, 2.0, 1.0, 0.0, 3.0];
    push(
        "weighted smooth-L1",
        finite_diff_check(|t, v| t.weighted_smooth_l1(v[0], &target, &weight), &[pred], &opts)?,
    );

    let x = randn(&mut rng, &[5, 4], 1.0);
    push(
        "dropout",
        finite_diff_check(
            |t, v| {
                let y = t.dropout(v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(9), true)?;
                mix(t, y, 9)
            },
            &[x],
            &opts,
        )?,
    );

    let a = randn(&mut rng, &[2, 3], 1.0);
    let b = randn(&mut rng, &[1, 3], 1.0);
    push(
        "concat, add, scale, mean",
        finite_diff_check(
            |t, v| {
                let c = t.concat(&[v[0], v[1]])?;
                let d = t.add(c, c)?;
                let s = t.scale(d, 0.7);
                let m = t.mean(s);
                let z = mix(t, c, 10)?;
                t.add_all(&[m, z])
            },
            &[a, b],
            &opts,
        )?,
    );

    let cfg = small_model();
    let (names, inputs) = composite_inputs(&cfg);
    let (image, annotations) = small_scene();
    let probes = GradCheckOptions {
        max_probes: Some(12),
        ..GradCheckOptions::default()
    };
    // proposals are constants of the objective; pin them to the unperturbed ones
    let proposals = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let p = bind(&names, &vars);
        let fmap = backbone_forward(&mut t, &p, &cfg, &image)?;
        rpn_forward(&mut t, &p, &cfg, fmap, (SMALL, SMALL))?.proposals.boxes
    };
    push(
        "detection loss (all parameters)",
        finite_diff_check(
            |t, v| {
                let p = bind(&names, v);
                let mut rng = derive_rng(0, Stream::Sampling, 0);
                Ok(detection_loss_with_proposals(t, &p, &cfg, &image, &annotations, &proposals, &mut rng)?.total)
            },
            &inputs,
            &probes,
        )?,
    );
    let q = RotationLabel::new(1)?;
    let rotated = rotate_image(&image, q)?;
    let boxes: Vec<BBox> = annotations.iter().map(|a| a.bbox).collect();
    push(
        "rotation loss (boxcrop, dropout)",
        finite_diff_check(
            |t, v| {
                let p = bind(&names, v);
                let fmap = backbone_forward(t, &p, &cfg, &rotated)?;
                let pooled = boxcrop(t, &cfg, fmap, &boxes, q, (SMALL as f64, SMALL as f64))?;
                let mut rng = derive_rng(0, Stream::Adapt, 0);
                let logits = rotation_head_forward(t, &p, &cfg, pooled, true, &mut rng)?;
                rotation_loss(t, &[(logits, q)])
            },
            &inputs,
            &probes,
        )?,
    );
    Ok(cases)
}
