//! Procedural shape scenes with exact box annotations, photometric style
//! shifts that stand in for unseen target domains, and dataset persistence.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox};
use crate::diffcore::Tensor;
use crate::error::{ensure, Error, Result};
use crate::seeding::{derive_rng, Stream};

pub const IMAGE_SIZE: usize = 128;
pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle", "star", "cross"];
pub const DATASET_VERSION: u32 = 1;

const MIN_OBJECT: usize = 16;
const MAX_OBJECT: usize = 56;
const MAX_PAIR_IOU: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// Class index into [`CLASS_NAMES`].
    pub class: usize,
    pub bbox: BBox,
}

/// Style identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    Plain,
    Fog,
    Posterize,
    Hueshift,
    Noise,
}

impl StyleKind {
    pub const ALL: [StyleKind; 5] = [
        StyleKind::Plain,
        StyleKind::Fog,
        StyleKind::Posterize,
        StyleKind::Hueshift,
        StyleKind::Noise,
    ];
    pub const SHIFTED: [StyleKind; 4] = [StyleKind::Fog, StyleKind::Posterize, StyleKind::Hueshift, StyleKind::Noise];

    pub fn name(self) -> &'static str {
        match self {
            StyleKind::Plain => "plain",
            StyleKind::Fog => "fog",
            StyleKind::Posterize => "posterize",
            StyleKind::Hueshift => "hueshift",
            StyleKind::Noise => "noise",
        }
    }

    /// Draws parameters uniformly from this style's range.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> StyleSpec {
        match self {
            StyleKind::Plain => StyleSpec::Plain,
            StyleKind::Fog => StyleSpec::Fog {
                a: rng.random_range(0.4..=0.8),
            },
            StyleKind::Posterize => StyleSpec::Posterize {
                levels: rng.random_range(2..=3),
            },
            StyleKind::Hueshift => StyleSpec::Hueshift {
                degrees: rng.random_range(60.0..=300.0),
            },
            StyleKind::Noise => StyleSpec::Noise {
                sigma: rng.random_range(0.05..=0.15),
            },
        }
    }
}

impl fmt::Display for StyleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StyleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StyleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown style {s:?}")))
    }
}

/// A photometric domain shift with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "lowercase")]
pub enum StyleSpec {
    Plain,
    /// Blend toward white by `a`, then a 3x3 box blur.
    Fog { a: f64 },
    /// Per-channel quantization to `levels` values.
    Posterize { levels: u32 },
    /// Hue rotation about the gray axis.
    Hueshift { degrees: f64 },
    /// Additive Gaussian noise, clamped.
    Noise { sigma: f64 },
}

impl StyleSpec {
    pub fn kind(&self) -> StyleKind {
        match self {
            StyleSpec::Plain => StyleKind::Plain,
            StyleSpec::Fog { .. } => StyleKind::Fog,
            StyleSpec::Posterize { .. } => StyleKind::Posterize,
            StyleSpec::Hueshift { .. } => StyleKind::Hueshift,
            StyleSpec::Noise { .. } => StyleKind::Noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    pub annotations: Vec<Annotation>,
    pub style: StyleSpec,
    pub sample_seed: u64,
}

impl ImageSample {
    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }
}

/// Renders one plain-style scene: a smooth textured background with one to
/// four shapes whose boxes do not overlap.
pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R) -> ImageSample {
    let sample_seed = rng.random();
    let n = IMAGE_SIZE;
    let mut img = vec![0f32; 3 * n * n];
    let mut base = [0f32; 3];
    for (c, b) in base.iter_mut().enumerate() {
        *b = rng.random_range(0.3..0.7);
        paint_background(&mut img[c * n * n..(c + 1) * n * n], *b, rng);
    }

    let wanted = rng.random_range(1..=4);
    let mut annotations: Vec<Annotation> = Vec::new();
    let mut attempts = 0;
    while annotations.len() < wanted && attempts < PLACEMENT_ATTEMPTS {
        attempts += 1;
        let w = rng.random_range(MIN_OBJECT..=MAX_OBJECT);
        let aspect: f64 = rng.random_range(0.75..=1.33);
        let h = ((w as f64 * aspect).round() as usize).clamp(MIN_OBJECT, MAX_OBJECT);
        let x = rng.random_range(0..=n - w);
        let y = rng.random_range(0..=n - h);
        let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        // Objects never touch, so every box is fully visible.
        if annotations.iter().any(|a| iou(&a.bbox, &bbox) > 0.0) {
            continue;
        }
        let class = rng.random_range(0..NUM_CLASSES);
        let color = contrasting_color(&base, rng);
        draw_shape(&mut img, class, &bbox, color);
        annotations.push(Annotation { class, bbox });
    }
    if annotations.is_empty() {
        // Unreachable in practice: the first attempt on an empty canvas always fits.
        let bbox = BBox::new(8.0, 8.0, 40.0, 40.0);
        let class = rng.random_range(0..NUM_CLASSES);
        draw_shape(&mut img, class, &bbox, contrasting_color(&base, rng));
        annotations.push(Annotation { class, bbox });
    }
    debug_assert!(annotations
        .iter()
        .enumerate()
        .all(|(i, a)| annotations[..i].iter().all(|b| iou(&a.bbox, &b.bbox) <= MAX_PAIR_IOU)));
    ImageSample {
        image: Tensor::new(vec![3, n, n], img).expect("image buffer matches shape"),
        annotations,
        style: StyleSpec::Plain,
        sample_seed,
    }
}

/// Brightness offset of the overhead light at row `t` in `[0,1]` (top to
/// bottom). Scenes have an upright orientation, like photographs do.
const LIGHT_SPAN: f32 = 0.12;
const SHADE_SPAN: f32 = 0.2;

fn light(t: f32, span: f32) -> f32 {
    span * (0.5 - t)
}

/// Low-frequency texture: a coarse random grid bilinearly upsampled, lit
/// from above.
fn paint_background<R: Rng + ?Sized>(plane: &mut [f32], base: f32, rng: &mut R) {
    const GRID: usize = 5;
    let knots: Vec<f32> = (0..GRID * GRID).map(|_| base + rng.random_range(-0.12..0.12)).collect();
    let n = IMAGE_SIZE;
    let scale = (GRID - 1) as f32 / (n - 1) as f32;
    for y in 0..n {
        let gy = y as f32 * scale;
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        let y1 = (y0 + 1).min(GRID - 1);
        for x in 0..n {
            let gx = x as f32 * scale;
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let x1 = (x0 + 1).min(GRID - 1);
            let top = knots[y0 * GRID + x0] * (1.0 - fx) + knots[y0 * GRID + x1] * fx;
            let bot = knots[y1 * GRID + x0] * (1.0 - fx) + knots[y1 * GRID + x1] * fx;
            let lit = top * (1.0 - fy) + bot * fy + 2.0 * light(y as f32 / (n - 1) as f32, LIGHT_SPAN);
            plane[y * n + x] = lit.clamp(0.0, 1.0);
        }
    }
}

fn contrasting_color<R: Rng + ?Sized>(base: &[f32; 3], rng: &mut R) -> [f32; 3] {
    loop {
        let c: [f32; 3] = std::array::from_fn(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0.0..0.25)
            } else {
                rng.random_range(0.75..1.0)
            }
        });
        let diff: f32 = c.iter().zip(base).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
        if diff >= 0.3 {
            return c;
        }
    }
}

/// Whether the normalized point `(u, v)` in `[-1,1]^2` lies inside the shape.
/// Every shape touches all four sides of the square, so annotation boxes are tight.
fn inside(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 1.0 && v.abs() <= 1.0,
        2 => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
        3 => inside_star(u, v),
        _ => u.abs() <= 1.0 && v.abs() <= 1.0 && (u.abs() <= 0.34 || v.abs() <= 0.34),
    }
}

fn star_polygon() -> [(f64, f64); 10] {
    let mut pts = [(0.0, 0.0); 10];
    for (i, p) in pts.iter_mut().enumerate() {
        let r = if i % 2 == 0 { 1.0 } else { 0.45 };
        let t = std::f64::consts::PI * (i as f64 / 5.0) - std::f64::consts::FRAC_PI_2;
        *p = (r * t.cos(), r * t.sin());
    }
    // Stretch to span exactly [-1,1] in both axes.
    let (xmin, xmax) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    pts.map(|(x, y)| (2.0 * (x - xmin) / (xmax - xmin) - 1.0, 2.0 * (y - ymin) / (ymax - ymin) - 1.0))
}

fn inside_star(u: f64, v: f64) -> bool {
    let pts = star_polygon();
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Draws with 4x4 supersampled coverage inside the box, shaded brighter at
/// the top.
fn draw_shape(img: &mut [f32], class: usize, b: &BBox, color: [f32; 3]) {
    const SS: usize = 4;
    let n = IMAGE_SIZE;
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    for y in b.y1 as usize..b.y2 as usize {
        for x in b.x1 as usize..b.x2 as usize {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(class, (px - cx) / hw, (py - cy) / hh) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cov = hits as f32 / (SS * SS) as f32;
            let shade = light(((y as f64 + 0.5 - b.y1) / b.height()) as f32, SHADE_SPAN);
            for (c, &col) in color.iter().enumerate() {
                let p = &mut img[c * n * n + y * n + x];
                *p = *p * (1.0 - cov) + (col + shade).clamp(0.0, 1.0) * cov;
            }
        }
    }
}

/// Applies a photometric style. Geometry never changes.
pub fn apply_style<R: Rng + ?Sized>(img: &Tensor<f32>, style: &StyleSpec, rng: &mut R) -> Tensor<f32> {
    let mut out = img.clone();
    match *style {
        StyleSpec::Plain => {}
        StyleSpec::Fog { a } => {
            let a = a as f32;
            out.data_mut().iter_mut().for_each(|v| *v = (1.0 - a) * *v + a);
            out = box_blur3(&out);
        }
        StyleSpec::Posterize { levels } => {
            let steps = (levels.max(2) - 1) as f32;
            out.data_mut().iter_mut().for_each(|v| *v = (*v * steps).round() / steps);
        }
        StyleSpec::Hueshift { degrees } => {
            let m = hue_matrix(degrees);
            let plane = img.shape()[1] * img.shape()[2];
            let src = img.data();
            let dst = out.data_mut();
            for i in 0..plane {
                let rgb = [src[i], src[plane + i], src[2 * plane + i]];
                for (c, row) in m.iter().enumerate() {
                    let v = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
                    dst[c * plane + i] = v.clamp(0.0, 1.0);
                }
            }
        }
        StyleSpec::Noise { sigma } => {
            let normal = Normal::new(0.0, sigma).expect("sigma is positive");
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0));
        }
    }
    out
}

/// Rotation about the (1,1,1) axis of RGB space.
fn hue_matrix(degrees: f64) -> [[f32; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let r = (1.0f64 / 3.0).sqrt() * s;
    let m = [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]];
    m.map(|row| row.map(|v| v as f32))
}

/// 3x3 mean filter with edge replication.
fn box_blur3(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = vec![0f32; src.len()];
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1i64, 0, 1] {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    for dx in [-1i64, 0, 1] {
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += p[yy * w + xx];
                    }
                }
                out[ch * h * w + y * w + x] = acc / 9.0;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Which styles a generated dataset draws from, one per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleMix(Vec<StyleKind>);

impl StyleMix {
    pub fn new(kinds: Vec<StyleKind>) -> Result<Self> {
        ensure!(!kinds.is_empty(), "style mix must name at least one style");
        Ok(StyleMix(kinds))
    }

    pub fn single(kind: StyleKind) -> Self {
        StyleMix(vec![kind])
    }

    /// Every shifted style, drawn uniformly per image.
    pub fn shifted() -> Self {
        StyleMix(StyleKind::SHIFTED.to_vec())
    }

    pub fn kinds(&self) -> &[StyleKind] {
        &self.0
    }

    /// Parses a comma-separated list such as `fog,posterize`; `mixed` expands
    /// to every shifted style.
    pub fn parse(list: &str) -> Result<Self> {
        let mut kinds = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "mixed" {
                kinds.extend(StyleKind::SHIFTED);
            } else {
                kinds.push(part.parse()?);
            }
        }
        StyleMix::new(kinds)
    }
}

/// Generates scene `index` under `seed`: a pure function of both, so any
/// index can be regenerated alone.
pub fn scene_at(seed: u64, index: u64, styles: &StyleMix) -> ImageSample {
    let mut rng = derive_rng(seed, Stream::Scene, index);
    let mut sample = gen_scene(&mut rng);
    let mut srng: ChaCha8Rng = derive_rng(seed, Stream::Style, index);
    let kinds = styles.kinds();
    let kind = kinds[srng.random_range(0..kinds.len())];
    let style = kind.sample(&mut srng);
    sample.image = apply_style(&sample.image, &style, &mut srng);
    sample.style = style;
    sample
}

/// Generates `count` scenes with indices `first..first+count`.
pub fn build_dataset(seed: u64, first: u64, count: usize, styles: &StyleMix) -> Vec<ImageSample> {
    use rayon::prelude::*;
    (first..first + count as u64)
        .into_par_iter()
        .map(|i| scene_at(seed, i, styles))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    count: usize,
    class_names: Vec<String>,
    style_table: Vec<StyleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StyleEntry {
    index: usize,
    style: StyleSpec,
    sample_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    index: usize,
    style: StyleKind,
    boxes: Vec<BoxRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    c: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

/// Writes `meta.json`, `images/{index}.png` (8-bit RGB), and
/// `annotations.jsonl` under `dir`.
pub fn write_dataset(samples: &[ImageSample], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let meta = Meta {
        version: DATASET_VERSION,
        count: samples.len(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        style_table: samples
            .iter()
            .enumerate()
            .map(|(index, s)| StyleEntry {
                index,
                style: s.style,
                sample_seed: s.sample_seed,
            })
            .collect(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = BufWriter::new(file);
    for (index, s) in samples.iter().enumerate() {
        let record = AnnotationRecord {
            index,
            style: s.style.kind(),
            boxes: s
                .annotations
                .iter()
                .map(|a| BoxRecord {
                    c: a.class,
                    x1: a.bbox.x1,
                    y1: a.bbox.y1,
                    x2: a.bbox.x2,
                    y2: a.bbox.y2,
                })
                .collect(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&ann_path, e))?;
        write_png(&images.join(format!("{index}.png")), &s.image)?;
    }
    out.flush().map_err(|e| Error::io(&ann_path, e))
}

/// Inverse of [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.version != DATASET_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("dataset version {} is not supported (expected {DATASET_VERSION})", meta.version),
        ));
    }
    if meta.style_table.len() != meta.count {
        return Err(Error::format(&meta_path, "style table length differs from count"));
    }

    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut records = Vec::with_capacity(meta.count);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::format(&ann_path, e.to_string()))?;
        records.push(r);
    }
    if records.len() != meta.count {
        return Err(Error::format(
            &ann_path,
            format!("{} annotation records for {} images", records.len(), meta.count),
        ));
    }

    let mut samples = Vec::with_capacity(meta.count);
    for (i, (record, entry)) in records.into_iter().zip(meta.style_table).enumerate() {
        if record.index != i || entry.index != i {
            return Err(Error::format(&ann_path, format!("record {i} is out of order")));
        }
        let annotations = record
            .boxes
            .iter()
            .map(|b| Annotation {
                class: b.c,
                bbox: BBox::new(b.x1, b.y1, b.x2, b.y2),
            })
            .collect::<Vec<_>>();
        if annotations.iter().any(|a| a.class >= NUM_CLASSES || !a.bbox.is_valid()) {
            return Err(Error::format(&ann_path, format!("record {i} has an invalid box")));
        }
        let image = read_png(&dir.join("images").join(format!("{i}.png")))?;
        samples.push(ImageSample {
            image,
            annotations,
            style: entry.style,
            sample_seed: entry.sample_seed,
        });
    }
    Ok(samples)
}

fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let src = img.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((src[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = buf[i * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}
