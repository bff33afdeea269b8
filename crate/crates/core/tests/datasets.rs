use std::fs;

use oshot::scenes::*;
use oshot::Error;

#[test]
fn write_then_read_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = build_dataset(3, 0, 12, &StyleMix::parse("plain,mixed").unwrap());
    write_dataset(&data, dir.path()).unwrap();

    let ann = fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap();
    assert_eq!(ann.lines().count(), data.len());
    assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), data.len());
    let first: serde_json::Value = serde_json::from_str(ann.lines().next().unwrap()).unwrap();
    assert_eq!(first["index"], 0);
    for key in ["c", "x1", "y1", "x2", "y2"] {
        assert!(first["boxes"][0].get(key).is_some(), "missing {key}");
    }

    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.style, b.style);
        assert_eq!(a.sample_seed, b.sample_seed);
        assert_eq!(a.image.shape(), b.image.shape());
        let worst = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0f32, f32::max);
        assert!(worst <= 1.0 / 510.0 + 1e-7, "max abs err {worst}");
    }
}

#[test]
fn missing_or_broken_files_are_errors() {
    let empty = tempfile::tempdir().unwrap();
    match read_dataset(empty.path()) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("meta.json")),
        other => panic!("expected an IO error, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    write_dataset(&build_dataset(1, 0, 3, &StyleMix::single(StyleKind::Plain)), dir.path()).unwrap();
    fs::remove_file(dir.path().join("images").join("2.png")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("2.png"), "{err}");

    let meta = dir.path().join("meta.json");
    let text = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, text.replacen("\"version\": 1", "\"version\": 99", 1)).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }) && err.to_string().contains("version"), "{err}");

    fs::write(&meta, "{ not json").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn class_frequencies_are_uniform() {
    let data = build_dataset(0, 0, 1000, &StyleMix::single(StyleKind::Plain));
    let mut counts = [0usize; NUM_CLASSES];
    for s in &data {
        for a in &s.annotations {
            counts[a.class] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    for (c, &n) in counts.iter().enumerate() {
        let f = n as f64 / total as f64;
        assert!((f - 0.2).abs() <= 0.03, "{} frequency {f:.3}", CLASS_NAMES[c]);
    }
}

#[test]
fn generated_scenes_respect_their_invariants() {
    let size = IMAGE_SIZE as f64;
    for s in build_dataset(5, 100, 300, &StyleMix::parse("plain,mixed").unwrap()) {
        assert!((1..=4).contains(&s.annotations.len()));
        for a in &s.annotations {
            assert!(a.class < NUM_CLASSES);
            assert!(a.bbox.is_valid() && a.bbox.within(size, size));
            assert!(a.bbox.area() >= 100.0);
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.image.shape(), &[3, IMAGE_SIZE, IMAGE_SIZE]);
    }
}

#[test]
fn styling_keeps_annotations() {
    for kind in StyleKind::ALL {
        let styled = scene_at(9, 4, &StyleMix::single(kind));
        let plain = scene_at(9, 4, &StyleMix::single(StyleKind::Plain));
        assert_eq!(styled.annotations, plain.annotations);
        assert_eq!(styled.style.kind(), kind);
        if kind != StyleKind::Plain {
            assert_ne!(styled.image, plain.image, "{kind} changed nothing");
        }
    }
}
