use oshot::boxgeom::*;
use oshot::diffcore::{Tape, Tensor};
use proptest::prelude::*;

fn q(n: u8) -> RotationLabel {
    RotationLabel::new(n).unwrap()
}

fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::new([c, h, w], (0..c * h * w).map(|i| i as f32).collect()).unwrap()
}

#[test]
fn iou_hand_cases() {
    let b = BBox::new(3.0, 4.0, 10.0, 12.0);
    assert!((iou(&b, &b) - 1.0).abs() <= 1e-12);
    assert_eq!(iou(&b, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    let third = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 3.0, 2.0));
    assert!((third - 1.0 / 3.0).abs() <= 1e-12);
}

#[test]
fn rotate_box_worked_example() {
    let r = rotate_box(&BBox::new(10.0, 5.0, 30.0, 25.0), q(1), 100.0, 50.0);
    assert_eq!(r, BBox::new(5.0, 70.0, 25.0, 90.0));
    assert!(r.within(50.0, 100.0));
}

#[test]
fn centered_square_is_fixed_under_rotation() {
    let b = BBox::new(40.0, 40.0, 88.0, 88.0);
    for k in 1..=4 {
        assert_eq!(rotate_box(&b, q(k), 128.0, 128.0), b);
    }
}

#[test]
fn rotate_image_moves_top_right_to_origin() {
    // 1x2x3: two rows, three columns.
    let img = ramp(1, 2, 3);
    let r = rotate_image(&img, q(1)).unwrap();
    assert_eq!(r.shape(), &[1, 3, 2]);
    assert_eq!(r.at(&[0, 0, 0]), img.at(&[0, 0, 2]));
    for y in 0..2 {
        for x in 0..3 {
            assert_eq!(r.at(&[0, 3 - 1 - x, y]), img.at(&[0, y, x]));
        }
    }
    assert_eq!(rotate_image(&img, q(4)).unwrap(), img);
}

#[test]
fn rotate_image_round_trips_exactly() {
    let img = ramp(3, 5, 7);
    for k in 1..=3u8 {
        let there = rotate_image(&img, q(k)).unwrap();
        let back = rotate_image(&there, q(4 - k)).unwrap();
        assert_eq!(back, img);
    }
    let mut x = img.clone();
    for _ in 0..4 {
        x = rotate_image(&x, q(1)).unwrap();
    }
    assert_eq!(x, img);
}

#[test]
fn nms_examples() {
    assert!(nms(&[], &[], 0.5).is_empty());
    let disjoint = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0)];
    assert_eq!(nms(&disjoint, &[0.3, 0.9], 0.5), vec![1, 0]);
    // 10x10 boxes shifted by 1: IoU 90/110 ~ 0.82.
    let close = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(1.0, 0.0, 11.0, 10.0)];
    assert!(iou(&close[0], &close[1]) > 0.8);
    assert_eq!(nms(&close, &[0.9, 0.8], 0.5), vec![0]);
}

#[test]
fn anchor_examples() {
    let a = gen_anchors(2, 2, 8, &[8.0], &[1.0]).unwrap();
    let centers: Vec<_> = a.iter().map(|a| a.bbox.center()).collect();
    assert_eq!(centers, vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]);
    assert!(a.iter().all(|a| a.bbox.width() == a.bbox.height()));
    let many = gen_anchors(16, 16, 8, &[16.0, 32.0, 64.0], &[1.0, 0.5, 2.0]).unwrap();
    assert_eq!(many.len(), 2304);
    for a in &many {
        let (cx, cy) = a.bbox.center();
        let (col, row) = ((cx - 4.0) / 8.0, (cy - 4.0) / 8.0);
        assert!((col - col.round()).abs() < 1e-9 && (row - row.round()).abs() < 1e-9);
        assert!((col.round() as usize, row.round() as usize) == (a.cell.1, a.cell.0));
    }
}

#[test]
fn delta_examples() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(encode_deltas(&a, &a).unwrap(), [0.0; 4]);
    let d = encode_deltas(&BBox::new(5.0, 0.0, 15.0, 10.0), &a).unwrap();
    assert_eq!(d, [0.5, 0.0, 0.0, 0.0]);
    let flat = BBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 5.0 };
    assert!(matches!(encode_deltas(&a, &flat), Err(oshot::Error::Contract(_))));
}

#[test]
fn anchor_assignment_examples() {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
    let anchors = [
        gt,
        BBox::new(50.0, 50.0, 60.0, 60.0),
        // IoU 50/100 = 0.5 with the gt.
        BBox::new(0.0, 0.0, 10.0, 5.0),
    ];
    let t = assign_anchor_targets(&anchors, &[gt], 0.7, 0.3).unwrap();
    assert_eq!(t.labels[0], AnchorLabel::Foreground { gt: 0, deltas: [0.0; 4] });
    assert_eq!(t.labels[1], AnchorLabel::Background);
    assert_eq!(t.labels[2], AnchorLabel::Ignore);
}

#[test]
fn roi_pool_examples() {
    let mut tape = Tape::<f32>::new();
    let constant = tape.constant(Tensor::full([2, 6, 6], 3.5));
    let p = roi_pool(&mut tape, constant, &[BBox::new(9.0, 3.0, 30.0, 41.0)], 8.0, (4, 4)).unwrap();
    assert_eq!(tape.shape(p), &[1, 2, 4, 4]);
    assert!(tape.value(p).data().iter().all(|&v| v == 3.5));

    let fmap = tape.constant(ramp(2, 4, 4));
    let whole = roi_pool(&mut tape, fmap, &[BBox::new(0.0, 0.0, 32.0, 32.0)], 8.0, (1, 1)).unwrap();
    assert_eq!(tape.value(whole).data(), &[15.0, 31.0]);

    for b in [BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(4.0, 4.0, 31.0, 20.0)] {
        let v = roi_pool(&mut tape, fmap, &[b], 8.0, (4, 4)).unwrap();
        assert_eq!(tape.shape(v), &[1, 2, 4, 4]);
    }
    let outside = roi_pool(&mut tape, fmap, &[BBox::new(100.0, 100.0, 120.0, 120.0)], 8.0, (4, 4));
    assert!(matches!(outside, Err(oshot::Error::Contract(_))));
}

fn arb_box(extent: f64) -> impl Strategy<Value = BBox> {
    (0.0..extent - 2.0, 0.0..extent - 2.0, 1.0..extent, 1.0..extent).prop_map(move |(x, y, w, h)| {
        let x2 = (x + w).min(extent);
        let y2 = (y + h).min(extent);
        BBox::new(x, y, x2.max(x + 1.0), y2.max(y + 1.0))
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(128.0), b in arb_box(128.0)) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rotate_box_inverts_and_stays_valid(
        (w, h) in (8u32..200, 8u32..200),
        fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.0..1.0f64, fh in 0.0..1.0f64,
        k in 1u8..=4,
    ) {
        let (w, h) = (w as f64, h as f64);
        let x1 = (fx * (w - 1.0)).floor();
        let y1 = (fy * (h - 1.0)).floor();
        let x2 = x1 + 1.0 + (fw * (w - x1 - 1.0)).floor();
        let y2 = y1 + 1.0 + (fh * (h - y1 - 1.0)).floor();
        let b = BBox::new(x1, y1, x2, y2);
        let label = q(k);
        let (rw, rh) = label.rotated_extent(w, h);
        let r = rotate_box(&b, label, w, h);
        prop_assert!(r.is_valid() && r.within(rw, rh));
        prop_assert_eq!(r.area(), b.area());
        prop_assert_eq!(rotate_box(&r, label.inverse(), rw, rh), b);
    }

    #[test]
    fn nms_survivors_are_sorted_and_separated(
        boxes in prop::collection::vec(arb_box(64.0), 0..20),
        seed in any::<u64>(),
        thresh in 0.1..0.9f64,
    ) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((seed.wrapping_mul(i as u64 + 7) >> 11) % 1000) as f64 / 1000.0).collect();
        let keep = nms(&boxes, &scores, thresh);
        for w in keep.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thresh);
            }
        }
        let mut unique = keep.clone();
        unique.dedup();
        prop_assert_eq!(unique.len(), keep.len());
    }

    #[test]
    fn deltas_round_trip(
        (gx, gy, gw, gh) in (0.0..100.0f64, 0.0..100.0f64, 4.0..120.0f64, 4.0..120.0f64),
        (ax, ay, aw, ah) in (0.0..100.0f64, 0.0..100.0f64, 4.0..120.0f64, 4.0..120.0f64),
    ) {
        let g = BBox::new(gx, gy, gx + gw, gy + gh);
        let a = BBox::new(ax, ay, ax + aw, ay + ah);
        let back = decode_deltas(&encode_deltas(&g, &a).unwrap(), &a).unwrap();
        for (x, y) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }
}
