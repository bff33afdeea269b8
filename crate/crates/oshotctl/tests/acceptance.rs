//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Pretraining dominates the runtime (six 6000-step runs). Set
//! `OSHOT_ACCEPTANCE_CACHE` to a directory to keep the checkpoints between
//! runs.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use oshot::boxgeom::{iou, rotate_box, rotate_image, BBox, RotationLabel};
use oshot::diffcore::Tensor;
use oshot::evalkit::{error_analysis, voc_ap, ErrorCounts};
use oshot::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use oshot::minidet::*;
use oshot::pipeline::*;
use oshot::scenes::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, id: usize, pass: bool, detail: String) {
    println!("criterion {id}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, pass, detail });
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pts(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let cases = match run_gradient_suite() {
        Ok(c) => c,
        Err(e) => return (false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let composite = ["detection loss", "rotation loss"].iter().all(|k| cases.iter().any(|c| c.name.contains(k)));
    let pass = failed.is_empty() && composite && secs < 120.0;
    (
        pass,
        format!(
            "{} cases, worst rel err {worst:.2e} (< {GRAD_TOLERANCE:.0e}), composite cases {}, {secs:.1}s, failed {failed:?}",
            cases.len(),
            if composite { "present" } else { "missing" }
        ),
    )
}

fn geometry() -> (bool, String) {
    let mut problems = Vec::new();
    let q = |k| RotationLabel::new(k).unwrap();
    if rotate_box(&BBox::new(10.0, 5.0, 30.0, 25.0), q(1), 100.0, 50.0) != BBox::new(5.0, 70.0, 25.0, 90.0) {
        problems.push("rotate_box example".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(8..200) as f64, rng.random_range(8..200) as f64);
        let x1 = rng.random_range(0.0..w - 1.0).floor();
        let y1 = rng.random_range(0.0..h - 1.0).floor();
        let b = BBox::new(x1, y1, rng.random_range(x1 + 1.0..=w).floor(), rng.random_range(y1 + 1.0..=h).floor());
        for k in 1..=4 {
            let (rw, rh) = if k % 2 == 1 { (h, w) } else { (w, h) };
            if rotate_box(&rotate_box(&b, q(k), w, h), q(k).inverse(), rw, rh) != b {
                problems.push(format!("box round trip {b:?} q={k}"));
            }
        }
    }
    let img = Tensor::new([3, 9, 13], (0..3 * 9 * 13).map(|v| v as f64 * 0.37).collect()).unwrap();
    for k in 1..=3 {
        let back = rotate_image(&rotate_image(&img, q(k)).unwrap(), q(4 - k)).unwrap();
        if back != img {
            problems.push(format!("image round trip q={k}"));
        }
    }
    let b = BBox::new(3.0, 4.0, 10.0, 12.0);
    let cases = [
        (iou(&b, &b), 1.0),
        (iou(&b, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0),
        (iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 3.0, 2.0)), 1.0 / 3.0),
    ];
    for (got, want) in cases {
        if (got - want).abs() > 1e-12 {
            problems.push(format!("IoU {got} != {want}"));
        }
    }
    (problems.is_empty(), if problems.is_empty() { "all checks exact".into() } else { problems.join("; ") })
}

fn ap_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f64;
    let mut mismatched = 0;
    for _ in 0..200 {
        let (dets, gts) = oracle::random_instance(&mut rng);
        let got = voc_ap(&dets, &gts, oracle::K, 0.5).unwrap();
        for (a, b) in got.per_class.iter().zip(oracle::oracle_ap(&dets, &gts, 0.5)) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => mismatched += 1,
            }
        }
    }
    (worst <= 1e-9 && mismatched == 0, format!("200 instances, max |diff| {worst:.1e}, presence mismatches {mismatched}"))
}

fn error_thresholds() -> (bool, String) {
    let gt = vec![vec![Annotation { class: 0, bbox: BBox::new(0.0, 0.0, 10.0, 10.0) }]];
    let one = |c, m, b| ErrorCounts { correct: c, mislocalized: m, background: b };
    let mut ok = true;
    let mut seen = Vec::new();
    for (x2, want) in [(6.0, one(1, 0, 0)), (4.0, one(0, 1, 0)), (1.0, one(0, 0, 1))] {
        let det = vec![vec![Detection { class: 0, score: 0.9, bbox: BBox::new(0.0, 0.0, x2, 10.0) }]];
        let got = error_analysis(&det, &gt, 1).unwrap();
        ok &= got == want;
        seen.push(format!("IoU {:.1} -> {}/{}/{}", x2 / 10.0, got.correct, got.mislocalized, got.background));
    }
    (ok, seen.join(", "))
}

fn discipline(params: &ModelParams<f32>, model: &ModelConfig) -> (bool, String) {
    let image = scene_at(4242, 0, &StyleMix::single(StyleKind::Fog)).image;
    let mut notes = Vec::new();
    let mut ok = true;
    let detector = params.group_hash(Group::Detector);
    for rotation_input in [RotationInput::Pseudobox, RotationInput::Image] {
        for gamma in [1, 7, 30] {
            let cfg = AdaptConfig { gamma, rotation_input, ..AdaptConfig::default() };
            let (adapted, _) = adapt_one(params, model, &cfg, &image, 3).unwrap();
            if adapted.group_hash(Group::Detector) != detector {
                ok = false;
                notes.push(format!("detector heads moved at gamma {gamma}"));
            }
        }
    }
    let zero = AdaptConfig { gamma: 0, ..AdaptConfig::default() };
    let (same, _) = adapt_one(params, model, &zero, &image, 3).unwrap();
    ok &= &same == params;
    notes.push(format!("gamma 0 identical: {}", &same == params));

    let cfg = AdaptConfig { gamma: 30, ..AdaptConfig::default() };
    let (_, records) = adapt_one(params, model, &cfg, &image, 3).unwrap();
    let losses: Vec<f64> = records.iter().map(|r| r.rotation_loss).collect();
    let (first, last) = (mean(&losses[..5]), mean(&losses[25..]));
    ok &= records.len() == 30 && last < first;
    notes.push(format!("L_r first5 {first:.4} last5 {last:.4}"));
    (ok, notes.join(", "))
}

fn cache_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("OSHOT_ACCEPTANCE_CACHE")?);
    fs::create_dir_all(&dir).ok()?;
    Some(dir)
}

fn pretrained(source: &[ImageSample], model: &ModelConfig, cfg: &PretrainConfig, name: &str) -> ModelParams<f32> {
    let cached = cache_dir().map(|d| d.join(format!("{name}.osh")));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        if let Ok(p) = load_checkpoint(path) {
            println!("  {name}: loaded {}", path.display());
            return p;
        }
    }
    let start = Instant::now();
    let params = pretrain(source, model, cfg, |_| {}).unwrap();
    println!("  {name}: pretrained in {:.0}s", start.elapsed().as_secs_f64());
    if let Some(path) = cached {
        save_checkpoint(&params, &path).unwrap();
    }
    params
}

fn map_at(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    adapt: &AdaptConfig,
    data: &[ImageSample],
    gammas: &[i64],
) -> Vec<f64> {
    let dc = DetectConfig::default();
    let gts: Vec<Vec<Annotation>> = data.iter().map(|s| s.annotations.clone()).collect();
    evaluate_stream_gammas(params, model, adapt, &dc, data, gammas, 1)
        .unwrap()
        .iter()
        .map(|dets| voc_ap(dets, &gts, NUM_CLASSES, 0.5).unwrap().map)
        .collect()
}

impl SeedRun {
    fn mixed_at(&self, gamma: i64) -> f64 {
        self.mixed[self.curve.iter().position(|&g| g == gamma).unwrap()]
    }
}

#[derive(Default)]
struct SeedRun {
    held_out: f64,
    baseline: f64,
    curve: Vec<i64>,
    mixed: Vec<f64>,
    fog: Vec<f64>,
    posterize: Vec<f64>,
    posterize_image: f64,
}

fn run_seed(seed: u64, model: &ModelConfig, curve: &[i64]) -> (SeedRun, ModelParams<f32>) {
    let source = build_dataset(seed, 0, 2000, &StyleMix::single(StyleKind::Plain));
    let joint = PretrainConfig { seed, ..PretrainConfig::default() };
    let oshot = pretrained(&source, model, &joint, &format!("oshot-seed{seed}"));
    let plain_cfg = PretrainConfig { lambda: 0.0, ..joint };
    let baseline = pretrained(&source, model, &plain_cfg, &format!("baseline-seed{seed}"));
    drop(source);

    let adapt = AdaptConfig { seed, ..AdaptConfig::default() };
    let held = build_dataset(seed, 2000, 200, &StyleMix::single(StyleKind::Plain));
    let mixed = build_dataset(1000 + seed, 0, 200, &StyleMix::shifted());
    let fog = build_dataset(2000 + seed, 0, 200, &StyleMix::single(StyleKind::Fog));
    let posterize = build_dataset(3000 + seed, 0, 200, &StyleMix::single(StyleKind::Posterize));

    let start = Instant::now();
    let mut run = SeedRun {
        held_out: map_at(&oshot, model, &adapt, &held, &[0])[0],
        baseline: map_at(&baseline, model, &adapt, &mixed, &[0])[0],
        curve: curve.to_vec(),
        mixed: map_at(&oshot, model, &adapt, &mixed, curve),
        fog: map_at(&oshot, model, &adapt, &fog, &[0, 30]),
        posterize: map_at(&oshot, model, &adapt, &posterize, &[0, 30]),
        ..SeedRun::default()
    };
    let image_mode = AdaptConfig { rotation_input: RotationInput::Image, ..adapt };
    run.posterize_image = map_at(&oshot, model, &image_mode, &posterize, &[30])[0];
    println!(
        "  seed {seed}: held-out {} | baseline {} | mixed {:?} at {curve:?} | fog {:?} | posterize {:?} (image mode {}) | eval {:.0}s",
        pts(run.held_out),
        pts(run.baseline),
        run.mixed.iter().map(|&v| pts(v)).collect::<Vec<_>>(),
        run.fog.iter().map(|&v| pts(v)).collect::<Vec<_>>(),
        run.posterize.iter().map(|&v| pts(v)).collect::<Vec<_>>(),
        pts(run.posterize_image),
        start.elapsed().as_secs_f64()
    );
    (run, oshot)
}

fn determinism(params: &ModelParams<f32>) -> (bool, String) {
    let root = tempfile::tempdir().unwrap();
    let p = |name: &str| root.path().join(name).to_str().unwrap().to_string();
    save_checkpoint(params, Path::new(&p("model.osh"))).unwrap();
    let cli = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_oshotctl")).args(args).output().unwrap();
        if !out.status.success() {
            panic!("oshotctl {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
    };
    cli(&["gen", "--count", "20", "--styles", "mixed", "--seed", "99", "--out", &p("targets")]);
    for (jobs, out) in [("1", "a"), ("1", "b"), ("4", "c")] {
        cli(&["--jobs", jobs, "eval", "--ckpt", &p("model.osh"), "--data", &p("targets"), "--out", &p(out)]);
    }
    let read = |d: &str| fs::read(root.path().join(d).join("report.json")).unwrap();
    let (a, b, c) = (read("a"), read("b"), read("c"));
    (a == b && a == c, format!("repeat identical: {}, jobs 4 == jobs 1: {}, {} bytes", a == b, a == c, a.len()))
}

fn main() {
    let total = Instant::now();
    let mut outcomes = Vec::new();
    let (ok, d) = gradients();
    record(&mut outcomes, 1, ok, d);
    let (ok, d) = geometry();
    record(&mut outcomes, 2, ok, d);
    let (ok, d) = ap_oracle();
    record(&mut outcomes, 3, ok, d);
    let (ok, d) = error_thresholds();
    record(&mut outcomes, 4, ok, d);

    let model = ModelConfig::default();
    let trend_start = Instant::now();
    let mut runs = Vec::new();
    let mut first_model = None;
    for seed in SEEDS {
        let curve: &[i64] = if seed == SEEDS[0] { &[0, 10, 30, 70] } else { &[0, 30] };
        let (run, params) = run_seed(seed, &model, curve);
        runs.push(run);
        first_model.get_or_insert(params);
    }
    let trend_secs = trend_start.elapsed().as_secs_f64();
    let first_model = first_model.unwrap();

    let (ok, d) = discipline(&first_model, &model);
    record(&mut outcomes, 5, ok, d);

    let g30 = mean(&runs.iter().map(|r| r.mixed_at(30)).collect::<Vec<_>>());
    let g0 = mean(&runs.iter().map(|r| r.mixed_at(0)).collect::<Vec<_>>());
    let base = mean(&runs.iter().map(|r| r.baseline).collect::<Vec<_>>());
    let fog_gain = mean(&runs.iter().map(|r| r.fog[1] - r.fog[0]).collect::<Vec<_>>());
    let post_gain = mean(&runs.iter().map(|r| r.posterize[1] - r.posterize[0]).collect::<Vec<_>>());
    let ordering = g30 >= g0 && g0 >= base;
    let gain = fog_gain >= 0.01 || post_gain >= 0.01;
    let fast = trend_secs < 1800.0;
    record(
        &mut outcomes,
        6,
        ordering && gain && fast,
        format!(
            "mixed mAP gamma30 {} gamma0 {} baseline {} (ordering {}); gain fog {:+} posterize {:+} points (>= +1.0: {}); runtime {:.0}s (< 1800s: {})",
            pts(g30),
            pts(g0),
            pts(base),
            ordering,
            pts(fog_gain),
            pts(post_gain),
            gain,
            trend_secs,
            fast
        ),
    );

    let pseudo = mean(&runs.iter().map(|r| r.posterize[1]).collect::<Vec<_>>());
    let image = mean(&runs.iter().map(|r| r.posterize_image).collect::<Vec<_>>());
    record(&mut outcomes, 7, pseudo >= image, format!("posterize gamma30 pseudobox {} image {}", pts(pseudo), pts(image)));

    let r = &runs[0];
    let (m0, m10, m30, m70) = (r.mixed_at(0), r.mixed_at(10), r.mixed_at(30), r.mixed_at(70));
    let drift = (m70 - m30).abs();
    record(
        &mut outcomes,
        8,
        m10 >= m0 && drift <= 0.015,
        format!("seed {} mAP(0) {} mAP(10) {} mAP(30) {} mAP(70) {} |70-30| {}", SEEDS[0], pts(m0), pts(m10), pts(m30), pts(m70), pts(drift)),
    );

    let (ok, d) = determinism(&first_model);
    record(&mut outcomes, 9, ok, d);

    let held: Vec<f64> = runs.iter().map(|r| r.held_out).collect();
    record(
        &mut outcomes,
        10,
        held.iter().all(|&m| m >= 0.5),
        format!("held-out plain mAP per seed {:?}", held.iter().map(|&v| format!("{v:.3}")).collect::<Vec<_>>()),
    );

    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!("acceptance: {}/{} passed in {:.0}s", outcomes.len() - failed.len(), outcomes.len(), total.elapsed().as_secs_f64());
    if !failed.is_empty() {
        for o in outcomes.iter().filter(|o| !o.pass) {
            eprintln!("failed criterion {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
