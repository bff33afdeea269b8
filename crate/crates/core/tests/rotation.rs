use oshot::boxgeom::{rotate_image, BBox, RotationLabel};
use oshot::diffcore::{Tape, Tensor};
use oshot::minidet::{backbone_forward, Detection, ModelConfig, ModelParams};
use oshot::rotsup::*;
use oshot::scenes::{scene_at, StyleKind, StyleMix};
use oshot::seeding::{derive_rng, Stream};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model() -> (ModelConfig, ModelParams<f32>) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, &mut derive_rng(7, Stream::Init, 0));
    (cfg, params)
}

#[test]
fn sample_rotation_is_uniform_and_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let q = sample_rotation(&mut rng);
        assert!((1..=4).contains(&q.q()));
        counts[q.class_index()] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.25).abs() <= 0.01, "frequency {f}");
    }
    let seq = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..32).map(|_| sample_rotation(&mut r).q()).collect::<Vec<_>>()
    };
    assert_eq!(seq(4), seq(4));
}

#[test]
fn rotation_loss_examples() {
    let q = RotationLabel::new(3).unwrap();
    let mut tape = Tape::<f64>::new();
    let uniform = tape.leaf(Tensor::zeros([2, 4]), true);
    let l = rotation_loss(&mut tape, &[(uniform, q)]).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

    let sat = tape.leaf(Tensor::new([1, 4], vec![0.0, 0.0, 60.0, 0.0]).unwrap(), true);
    let l = rotation_loss(&mut tape, &[(sat, q)]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-12);

    let rows = [0.3, -0.2, 1.0, 0.1, 2.0, -1.0, 0.0, 0.5, -0.7, 0.4, 0.9, 0.2];
    let a = tape.leaf(Tensor::new([3, 4], rows.to_vec()).unwrap(), true);
    let mut permuted = rows[8..].to_vec();
    permuted.extend_from_slice(&rows[..8]);
    let b = tape.leaf(Tensor::new([3, 4], permuted).unwrap(), true);
    let la = rotation_loss(&mut tape, &[(a, q)]).unwrap();
    let lb = rotation_loss(&mut tape, &[(b, q)]).unwrap();
    assert!((tape.value(la).data()[0] - tape.value(lb).data()[0]).abs() < 1e-12);
}

#[test]
fn identity_pseudo_crop_equals_box_crop() {
    let (cfg, params) = model();
    let img = scene_at(3, 1, &StyleMix::single(StyleKind::Plain)).image;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let f = backbone_forward(&mut tape, &p, &cfg, &img).unwrap();
    let boxes = [BBox::new(4.0, 10.0, 50.0, 40.0), BBox::new(70.0, 66.0, 120.0, 127.0)];
    let dets: Vec<Detection> = boxes.iter().map(|&bbox| Detection { class: 1, score: 0.9, bbox }).collect();
    let id = RotationLabel::IDENTITY;
    let direct = boxcrop(&mut tape, &cfg, f, &boxes, id, (128.0, 128.0)).unwrap();
    match pseudoboxcrop(&mut tape, &cfg, f, &dets, id, (128.0, 128.0), 0.5, 8).unwrap() {
        PseudoCrop::Regions { pooled, count } => {
            assert_eq!(count, 2);
            assert_eq!(tape.shape(pooled), &[2, 64, 4, 4]);
            assert_eq!(tape.value(pooled), tape.value(direct));
        }
        PseudoCrop::Fallback => panic!("confident boxes fell back"),
    }
}

#[test]
fn top_left_box_lands_bottom_left_after_a_quarter_turn() {
    let (cfg, params) = model();
    let mut img = Tensor::full([3, 128, 128], 0.0f32);
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                img.data_mut()[c * 128 * 128 + y * 128 + x] = 1.0;
            }
        }
    }
    let q = RotationLabel::new(1).unwrap();
    let rot = rotate_image(&img, q).unwrap();
    let bright = (0..128).flat_map(|y| (0..128).map(move |x| (y, x))).filter(|&(y, x)| rot.at(&[0, y, x]) == 1.0);
    assert!(bright.clone().all(|(y, x)| y >= 96 && x < 32));
    assert_eq!(bright.count(), 32 * 32);

    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let f = backbone_forward(&mut tape, &p, &cfg, &rot).unwrap();
    let corner = Detection {
        class: 0,
        score: 0.99,
        bbox: BBox::new(0.0, 0.0, 32.0, 32.0),
    };
    let from_pseudo = match pseudoboxcrop(&mut tape, &cfg, f, &[corner], q, (128.0, 128.0), 0.5, 8).unwrap() {
        PseudoCrop::Regions { pooled, .. } => pooled,
        PseudoCrop::Fallback => panic!("fell back"),
    };
    let bottom_left = boxcrop(&mut tape, &cfg, f, &[BBox::new(0.0, 96.0, 32.0, 128.0)], RotationLabel::IDENTITY, (128.0, 128.0)).unwrap();
    assert_eq!(tape.value(from_pseudo), tape.value(bottom_left));
}

#[test]
fn zero_backbone_gives_chance_rotation_loss() {
    let (cfg, mut params) = model();
    for (name, t) in params.iter_mut() {
        if name.starts_with("f.") {
            t.data_mut().fill(0.0);
        }
    }
    let img = scene_at(2, 5, &StyleMix::single(StyleKind::Fog)).image;
    let boxes = [BBox::new(10.0, 10.0, 60.0, 50.0)];
    for q in RotationLabel::ALL {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let rot = rotate_image(&img, q).unwrap();
        let f = backbone_forward(&mut tape, &p, &cfg, &rot).unwrap();
        let pooled = boxcrop(&mut tape, &cfg, f, &boxes, q, (128.0, 128.0)).unwrap();
        let logits = rotation_head_forward(&mut tape, &p, &cfg, pooled, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tape.shape(logits), &[1, 4]);
        let l = rotation_loss(&mut tape, &[(logits, q)]).unwrap();
        assert!((tape.value(l).data()[0] - 4f32.ln()).abs() < 1e-6);
    }
}

#[test]
fn inference_head_is_deterministic() {
    let (cfg, params) = model();
    let img = scene_at(6, 0, &StyleMix::single(StyleKind::Noise)).image;
    let run = |seed| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let f = backbone_forward(&mut tape, &p, &cfg, &img).unwrap();
        let pooled = whole_image(&mut tape, &cfg, f, (128.0, 128.0)).unwrap();
        let l = rotation_head_forward(&mut tape, &p, &cfg, pooled, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        tape.value(l).clone()
    };
    assert_eq!(run(1), run(2));
}
