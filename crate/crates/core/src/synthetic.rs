//! Synthetic two-domain shape benchmark.
//!
//! Scenes hold 1–4 flat-colored shapes (disc, square, triangle) on a smooth
//! background. The source domain is rendered clean; the target domain is
//! the same scene distribution seen through a hue rotation, fog and sensor
//! noise. Everything is quantized to 8 bits so that the in-memory dataset
//! and its PNG round-trip are identical.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NsaError, Result};
use crate::geometry::{BBox, Domain, FrameId, Image, ImageSample, LabelKind, LabelSet};

pub const SHAPE_NAMES: [&str; 3] = ["disc", "square", "triangle"];

pub const SOURCE_TRAIN: &str = "source_train";
pub const TARGET_TRAIN: &str = "target_train";
pub const TARGET_VAL: &str = "target_val";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetStyle {
    /// Blend weight toward the fog color.
    pub fog_alpha: f64,
    pub fog_level: f64,
    pub noise_sigma: f64,
    /// Hue rotation in turns.
    pub hue_shift: f64,
}

impl Default for TargetStyle {
    fn default() -> Self {
        Self {
            fog_alpha: 0.5,
            fog_level: 0.85,
            noise_sigma: 0.06,
            hue_shift: 0.33,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub canvas_size: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object side range in pixels (rounded down to even).
    pub size_min: usize,
    pub size_max: usize,
    /// Placement rejects a new object overlapping an earlier one above this IoU.
    pub max_overlap_iou: f64,
    pub target_style: TargetStyle,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            num_classes: 3,
            objects_min: 1,
            objects_max: 4,
            size_min: 10,
            size_max: 36,
            max_overlap_iou: 0.3,
            target_style: TargetStyle::default(),
            source_train: 400,
            target_train: 400,
            target_val: 200,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NsaError::Config(format!("synthetic scene: {m}")));
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return bad("num_classes must be 1..=3");
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min > objects_max");
        }
        if self.size_min < 2 || self.size_min > self.size_max || self.size_max > self.canvas_size {
            return bad("object size range must satisfy 2 <= min <= max <= canvas");
        }
        let t = &self.target_style;
        if !(t.fog_alpha > 0.0 && t.fog_alpha <= 1.0 && t.noise_sigma > 0.0 && t.hue_shift != 0.0) {
            return bad("target style must be strictly nonzero");
        }
        Ok(())
    }
}

/// One rendered image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub file: String,
    pub image: Image,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub name: String,
    pub domain: Domain,
    pub images: Vec<SceneImage>,
}

impl SplitData {
    /// Samples with ground truth attached.
    pub fn samples(&self) -> Vec<ImageSample> {
        let tag = split_tag(&self.name);
        self.images
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let frame = FrameId::raw(tag, i as u64);
                ImageSample::new(s.image.clone(), self.domain, frame)
                    .with_labels(LabelSet::new(frame, LabelKind::GroundTruth, s.boxes.clone()))
            })
            .collect()
    }

    pub fn mean_intensity(&self) -> f64 {
        self.images.iter().map(|s| s.image.mean()).sum::<f64>() / self.images.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub source_train: SplitData,
    pub target_train: SplitData,
    pub target_val: SplitData,
}

impl SyntheticDataset {
    pub fn splits(&self) -> [&SplitData; 3] {
        [&self.source_train, &self.target_train, &self.target_val]
    }
}

pub fn split_tag(name: &str) -> u64 {
    match name {
        SOURCE_TRAIN => 1,
        TARGET_TRAIN => 2,
        TARGET_VAL => 3,
        other => other.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3)),
    }
}

fn image_seed(seed: u64, tag: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the packed triple
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let split = |name: &str, n: usize, domain: Domain| {
        let tag = split_tag(name);
        let images = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, tag, i));
                let (mut image, boxes) = render_scene(spec, &mut rng);
                if domain == Domain::Target {
                    apply_target_style(&mut image, &spec.target_style, &mut rng);
                }
                quantize(&mut image);
                SceneImage {
                    file: format!("{i:06}.png"),
                    image,
                    boxes,
                }
            })
            .collect();
        SplitData {
            name: name.to_string(),
            domain,
            images,
        }
    };
    Ok(SyntheticDataset {
        source_train: split(SOURCE_TRAIN, spec.source_train, Domain::Source),
        target_train: split(TARGET_TRAIN, spec.target_train, Domain::Target),
        target_val: split(TARGET_VAL, spec.target_val, Domain::Target),
    })
}

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    fn from_class(c: usize) -> Self {
        [Shape::Disc, Shape::Square, Shape::Triangle][c]
    }

    /// Coverage test relative to the center, with `h` the half side.
    fn covers(self, dx: f64, dy: f64, h: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= h * h,
            Shape::Square => dx.abs() <= h && dy.abs() <= h,
            // apex at the top center, base along the bottom edge
            Shape::Triangle => dy <= h && dy >= -h && dx.abs() <= (dy + h) / 2.0,
        }
    }
}

const SUPERSAMPLE: usize = 4;

fn render_scene(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> (Image, Vec<BBox>) {
    let n = spec.canvas_size;
    let mut img = Image::new(n, n);

    // smooth tinted background with a linear gradient
    let base: f64 = rng.gen_range(0.12..0.4);
    let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.gen_range(0.0..0.12);
    let (gx, gy) = (angle.cos() * amp / n as f64, angle.sin() * amp / n as f64);
    for y in 0..n {
        for x in 0..n {
            let g = base + gx * (x as f64 - n as f64 / 2.0) + gy * (y as f64 - n as f64 / 2.0);
            for (c, t) in tint.iter().enumerate() {
                img.set(c, y, x, (g + t).clamp(0.0, 1.0) as f32);
            }
        }
    }

    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..50 {
            let side = rng.gen_range(spec.size_min..=spec.size_max) & !1;
            let half = side / 2;
            let cx = rng.gen_range(half..=n - half);
            let cy = rng.gen_range(half..=n - half);
            let class_id = rng.gen_range(0..spec.num_classes);
            let color = hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.65..1.0));
            let b = BBox::new(
                (cx - half) as f64,
                (cy - half) as f64,
                (cx + half) as f64,
                (cy + half) as f64,
                class_id,
            );
            if boxes.iter().any(|o| o.iou(&b) > spec.max_overlap_iou) {
                continue;
            }
            draw_shape(&mut img, Shape::from_class(class_id), cx as f64, cy as f64, half as f64, color);
            boxes.push(b);
            break;
        }
    }
    (img, boxes)
}

fn draw_shape(img: &mut Image, shape: Shape, cx: f64, cy: f64, h: f64, color: [f64; 3]) {
    let n = img.width();
    let lo_x = (cx - h).floor().max(0.0) as usize;
    let hi_x = ((cx + h).ceil() as usize).min(n);
    let lo_y = (cy - h).floor().max(0.0) as usize;
    let hi_y = ((cy + h).ceil() as usize).min(img.height());
    let ss = SUPERSAMPLE as f64;
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / ss;
                    let py = y as f64 + (sy as f64 + 0.5) / ss;
                    if shape.covers(px - cx, py - cy, h) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f64 / (ss * ss);
            for (c, &col) in color.iter().enumerate() {
                let v = img.get(c, y, x) as f64;
                img.set(c, y, x, (v * (1.0 - a) + col * a) as f32);
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Luma-preserving hue rotation by `turns`.
fn hue_matrix(turns: f64) -> [[f64; 3]; 3] {
    let (s, c) = (turns * std::f64::consts::TAU).sin_cos();
    [
        [0.213 + c * 0.787 - s * 0.213, 0.715 - c * 0.715 - s * 0.715, 0.072 - c * 0.072 + s * 0.928],
        [0.213 - c * 0.213 + s * 0.143, 0.715 + c * 0.285 + s * 0.140, 0.072 - c * 0.072 - s * 0.283],
        [0.213 - c * 0.213 - s * 0.787, 0.715 - c * 0.715 + s * 0.715, 0.072 + c * 0.928 + s * 0.072],
    ]
}

/// Hue shift, then fog, then noise.
pub fn apply_target_style(img: &mut Image, style: &TargetStyle, rng: &mut ChaCha8Rng) {
    let m = hue_matrix(style.hue_shift);
    let noise = Normal::new(0.0, style.noise_sigma).expect("positive sigma");
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let p = [img.get(0, y, x) as f64, img.get(1, y, x) as f64, img.get(2, y, x) as f64];
            for (c, row) in m.iter().enumerate() {
                let hue = (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]).clamp(0.0, 1.0);
                let fog = (1.0 - style.fog_alpha) * hue + style.fog_alpha * style.fog_level;
                img.set(c, y, x, fog as f32);
            }
        }
    }
    for v in img.data_mut() {
        *v = (*v as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

fn quantize(img: &mut Image) {
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoxRecord>,
}

pub fn write_dataset(ds: &SyntheticDataset, root: &Path) -> Result<()> {
    for split in ds.splits() {
        let dir = root.join(&split.name);
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| NsaError::io(&images, e))?;
        split
            .images
            .par_iter()
            .try_for_each(|s| s.image.save_png(&images.join(&s.file)))?;
        let records: Vec<AnnotationRecord> = split
            .images
            .iter()
            .map(|s| AnnotationRecord {
                file: s.file.clone(),
                width: s.image.width(),
                height: s.image.height(),
                boxes: s
                    .boxes
                    .iter()
                    .map(|b| BoxRecord {
                        x_min: b.x_min.round() as i64,
                        y_min: b.y_min.round() as i64,
                        x_max: b.x_max.round() as i64,
                        y_max: b.y_max.round() as i64,
                        class_id: b.class_id,
                    })
                    .collect(),
            })
            .collect();
        let path = dir.join("annotations.json");
        let json = serde_json::to_string_pretty(&records).map_err(|source| NsaError::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, json).map_err(|e| NsaError::io(&path, e))?;
    }
    Ok(())
}

pub fn load_split(root: &Path, name: &str) -> Result<SplitData> {
    let dir = root.join(name);
    let path = dir.join("annotations.json");
    let text = fs::read_to_string(&path).map_err(|e| NsaError::io(&path, e))?;
    let records: Vec<AnnotationRecord> =
        serde_json::from_str(&text).map_err(|source| NsaError::Json { path: path.clone(), source })?;
    let images = records
        .par_iter()
        .map(|r| {
            let image = Image::load_png(&dir.join("images").join(&r.file))?;
            if (image.width(), image.height()) != (r.width, r.height) {
                return Err(NsaError::Dataset(format!(
                    "{}: annotated as {}x{}, image is {}x{}",
                    r.file,
                    r.width,
                    r.height,
                    image.width(),
                    image.height()
                )));
            }
            let boxes = r
                .boxes
                .iter()
                .map(|b| BBox::new(b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64, b.class_id))
                .collect();
            Ok(SceneImage {
                file: r.file.clone(),
                image,
                boxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let domain = if name == SOURCE_TRAIN { Domain::Source } else { Domain::Target };
    Ok(SplitData {
        name: name.to_string(),
        domain,
        images,
    })
}

pub fn load_dataset(root: &Path) -> Result<SyntheticDataset> {
    Ok(SyntheticDataset {
        source_train: load_split(root, SOURCE_TRAIN)?,
        target_train: load_split(root, TARGET_TRAIN)?,
        target_val: load_split(root, TARGET_VAL)?,
    })
}
