//! Test-only AP reference and random instance generator, shared with the
//! acceptance run.

use oshot::boxgeom::{iou, BBox};
use oshot::minidet::Detection;
use oshot::scenes::Annotation;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const K: usize = 3;

pub fn det(class: usize, score: f64, b: BBox) -> Detection {
    Detection { class, score, bbox: b }
}

pub fn gt(class: usize, b: BBox) -> Annotation {
    Annotation { class, bbox: b }
}

/// Reference AP: matches by scanning the whole IoU table, then integrates
/// the envelope one recall level at a time.
pub fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], thr: f64) -> Vec<Option<f64>> {
    (0..K)
        .map(|c| {
            let n_gt: usize = gts.iter().map(|g| g.iter().filter(|a| a.class == c).count()).sum();
            if n_gt == 0 {
                return None;
            }
            let mut ranked = Vec::new();
            for (i, ds) in dets.iter().enumerate() {
                for (j, d) in ds.iter().enumerate() {
                    if d.class == c {
                        ranked.push((d.score, i, j));
                    }
                }
            }
            // Insertion sort: descending score, earlier (image, index) first on ties.
            for a in 1..ranked.len() {
                let mut b = a;
                while b > 0 && ranked[b].0 > ranked[b - 1].0 {
                    ranked.swap(b, b - 1);
                    b -= 1;
                }
            }
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = Vec::new();
            for &(_, i, j) in &ranked {
                let table: Vec<f64> = gts[i].iter().map(|g| iou(&dets[i][j].bbox, &g.bbox)).collect();
                let mut best: Option<usize> = None;
                for (k, g) in gts[i].iter().enumerate() {
                    if g.class != c || taken[i][k] || table[k] < thr {
                        continue;
                    }
                    if best.is_none_or(|b| table[k] > table[b]) {
                        best = Some(k);
                    }
                }
                if let Some(k) = best {
                    taken[i][k] = true;
                }
                tp.push(best.is_some());
            }
            let mut total = 0.0;
            for level in 1..=n_gt {
                let mut best_precision = 0.0f64;
                let mut hits = 0;
                for (n, &t) in tp.iter().enumerate() {
                    hits += t as usize;
                    if hits >= level {
                        best_precision = best_precision.max(hits as f64 / (n + 1) as f64);
                    }
                }
                total += best_precision / n_gt as f64;
            }
            Some(total)
        })
        .collect()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..100.0);
    let y = rng.random_range(0.0..100.0);
    BBox::new(x, y, x + rng.random_range(4.0..28.0), y + rng.random_range(4.0..28.0))
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let images = rng.random_range(1..=10);
    let coarse = rng.random_bool(0.5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<Annotation> = (0..rng.random_range(0..=5))
            .map(|_| gt(rng.random_range(0..K), random_box(rng)))
            .collect();
        let d: Vec<Detection> = (0..rng.random_range(0..=5))
            .map(|_| {
                let mut score: f64 = rng.random();
                if coarse {
                    score = (score * 4.0).floor() / 4.0;
                }
                if !g.is_empty() && rng.random_bool(0.7) {
                    let src = g[rng.random_range(0..g.len())];
                    let s = rng.random_range(-4.0..4.0);
                    let b = BBox::new(src.bbox.x1 + s, src.bbox.y1, src.bbox.x2 + s, src.bbox.y2 + s.abs());
                    let class = if rng.random_bool(0.8) { src.class } else { rng.random_range(0..K) };
                    det(class, score, b)
                } else {
                    det(rng.random_range(0..K), score, random_box(rng))
                }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

