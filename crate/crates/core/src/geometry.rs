//! Core value types: images, boxes, label sets and the invertible geometric
//! records that move annotations and pixels between coordinate frames.
//!
//! A [`GeoRecord`] realizes resize → horizontal flip → crop → translate. All
//! four steps are axis-aligned, so every record is a per-axis affine map
//! `x' = a·x + b` on continuous pixel coordinates (pixel `k` covers
//! `[k, k+1)`, its center sits at `k + 0.5`).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{NsaError, Result};
use crate::tensor::Tensor;

/// Boxes whose clipped area falls below this many square pixels are dropped.
pub const DEFAULT_MIN_AREA_PX: f64 = 4.0;

const FRAME_EPS: f64 = 1e-9;

/// Identifier of a pixel coordinate frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameId(pub u64);

impl FrameId {
    /// Frame of the `index`-th raw image of a split.
    pub fn raw(split_tag: u64, index: u64) -> Self {
        let mut h = Fnv::new();
        h.write_u64(0x5eed);
        h.write_u64(split_tag);
        h.write_u64(index);
        FrameId(h.finish())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: usize,
    pub score: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn longer_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_deviation(&self, other: &BBox) -> f64 {
        (self.x_min - other.x_min)
            .abs()
            .max((self.y_min - other.y_min).abs())
            .max((self.x_max - other.x_max).abs())
            .max((self.y_max - other.y_max).abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelKind {
    GroundTruth,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub boxes: Vec<BBox>,
    pub frame: FrameId,
    pub kind: LabelKind,
}

impl LabelSet {
    pub fn new(frame: FrameId, kind: LabelKind, boxes: Vec<BBox>) -> Self {
        Self { boxes, frame, kind }
    }

    pub fn empty(frame: FrameId, kind: LabelKind) -> Self {
        Self::new(frame, kind, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// A 3-channel image stored planar (`[c][y][x]`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// `[3, h, w]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Self {
        assert_eq!(rgb.len(), 3 * width * height);
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.set(c, y, x, rgb[(y * width + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        img
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = vec![0u8; 3 * self.width * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.get(c, y, x).clamp(0.0, 1.0);
                    out[(y * self.width + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| NsaError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| NsaError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        Ok(Self::from_rgb8(
            rgb.width() as usize,
            rgb.height() as usize,
            rgb.as_raw(),
        ))
    }

    /// Bilinear sample of channel `c` at continuous coordinates `(x, y)`.
    ///
    /// Coordinates outside `[0, w] × [0, h]` are mirrored back inside; the
    /// half-pixel margin at the border clamps to the edge pixel.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let x = reflect_coord(x, self.width as f64) - 0.5;
        let y = reflect_coord(y, self.height as f64) - 0.5;
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(c, y0, x0) as f64 * (1.0 - fx) + self.get(c, y0, x1) as f64 * fx;
        let bot = self.get(c, y1, x0) as f64 * (1.0 - fx) + self.get(c, y1, x1) as f64 * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    }
}

/// Mirror a continuous coordinate into `[0, extent]`.
pub(crate) fn reflect_coord(v: f64, extent: f64) -> f64 {
    if (0.0..=extent).contains(&v) {
        return v;
    }
    let period = 2.0 * extent;
    let m = v.rem_euclid(period);
    if m <= extent {
        m
    } else {
        period - m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    pub pixels: Arc<Image>,
    pub domain: Domain,
    pub labels: Option<LabelSet>,
    pub frame: FrameId,
}

impl ImageSample {
    pub fn new(pixels: Image, domain: Domain, frame: FrameId) -> Self {
        Self {
            pixels: Arc::new(pixels),
            domain,
            labels: None,
            frame,
        }
    }

    pub fn with_labels(mut self, labels: LabelSet) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Resize by `scale`, optionally mirror horizontally, cut a `crop_size`
/// window at `crop_origin`, then shift the content by `translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoRecord {
    pub src_frame: FrameId,
    pub dst_frame: FrameId,
    /// `(width, height)` of the source frame.
    pub src_size: (usize, usize),
    pub scale: f64,
    pub flip_h: bool,
    pub crop_origin: (f64, f64),
    /// `(width, height)` of the output frame.
    pub crop_size: (usize, usize),
    pub translation: (f64, f64),
    /// The crop window may extend past the resized image; the excess is
    /// filled by reflection.
    pub reflect_pad: bool,
}

/// Per-axis affine map `v' = a·v + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisMap {
    pub a: f64,
    pub b: f64,
}

impl AxisMap {
    pub fn apply(&self, v: f64) -> f64 {
        self.a * v + self.b
    }

    pub fn unapply(&self, v: f64) -> f64 {
        (v - self.b) / self.a
    }
}

impl GeoRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        src_frame: FrameId,
        src_size: (usize, usize),
        scale: f64,
        flip_h: bool,
        crop_origin: (f64, f64),
        crop_size: (usize, usize),
        translation: (f64, f64),
        reflect_pad: bool,
    ) -> Self {
        let mut rec = Self {
            src_frame,
            dst_frame: src_frame,
            src_size,
            scale,
            flip_h,
            crop_origin,
            crop_size,
            translation,
            reflect_pad,
        };
        rec.dst_frame = rec.derived_frame();
        rec
    }

    pub fn identity(frame: FrameId, size: (usize, usize)) -> Self {
        Self {
            src_frame: frame,
            dst_frame: frame,
            src_size: size,
            scale: 1.0,
            flip_h: false,
            crop_origin: (0.0, 0.0),
            crop_size: size,
            translation: (0.0, 0.0),
            reflect_pad: false,
        }
    }

    /// Resize about the image center and cut a window of `out_size` around
    /// the resized center, then translate.
    pub fn centered(
        src_frame: FrameId,
        src_size: (usize, usize),
        scale: f64,
        flip_h: bool,
        out_size: (usize, usize),
        translation: (f64, f64),
    ) -> Self {
        let rw = scale * src_size.0 as f64;
        let rh = scale * src_size.1 as f64;
        let origin = ((rw - out_size.0 as f64) / 2.0, (rh - out_size.1 as f64) / 2.0);
        let pad = origin.0 < -FRAME_EPS || origin.1 < -FRAME_EPS;
        Self::new(src_frame, src_size, scale, flip_h, origin, out_size, translation, pad)
    }

    fn derived_frame(&self) -> FrameId {
        let mut h = Fnv::new();
        h.write_u64(self.src_frame.0);
        h.write_u64(self.src_size.0 as u64);
        h.write_u64(self.src_size.1 as u64);
        h.write_u64(self.scale.to_bits());
        h.write_u64(self.flip_h as u64);
        h.write_u64(self.crop_origin.0.to_bits());
        h.write_u64(self.crop_origin.1.to_bits());
        h.write_u64(self.crop_size.0 as u64);
        h.write_u64(self.crop_size.1 as u64);
        h.write_u64(self.translation.0.to_bits());
        h.write_u64(self.translation.1.to_bits());
        FrameId(h.finish())
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0
            && !self.flip_h
            && self.crop_origin == (0.0, 0.0)
            && self.translation == (0.0, 0.0)
            && self.crop_size == self.src_size
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(NsaError::InvalidGeo(format!("scale {} must be > 0", self.scale)));
        }
        if self.src_size.0 == 0 || self.src_size.1 == 0 || self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(NsaError::InvalidGeo("zero-sized frame".into()));
        }
        let finite = [
            self.crop_origin.0,
            self.crop_origin.1,
            self.translation.0,
            self.translation.1,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(NsaError::InvalidGeo("non-finite offset".into()));
        }
        Ok(())
    }

    fn check_window(&self) -> Result<()> {
        if self.reflect_pad {
            return Ok(());
        }
        let rw = self.scale * self.src_size.0 as f64;
        let rh = self.scale * self.src_size.1 as f64;
        let (cx, cy) = self.crop_origin;
        let (cw, ch) = (self.crop_size.0 as f64, self.crop_size.1 as f64);
        let tol = 1e-6;
        if cx < -tol || cy < -tol || cx + cw > rw + tol || cy + ch > rh + tol {
            return Err(NsaError::CropOutOfRange {
                window: (cx, cy, cx + cw, cy + ch),
                resized: (rw, rh),
            });
        }
        Ok(())
    }

    /// Horizontal and vertical affine maps from source to output coordinates.
    pub fn axis_maps(&self) -> (AxisMap, AxisMap) {
        let s = self.scale;
        let (ax, flip_off) = if self.flip_h {
            (-s, s * self.src_size.0 as f64)
        } else {
            (s, 0.0)
        };
        (
            AxisMap {
                a: ax,
                b: flip_off - self.crop_origin.0 + self.translation.0,
            },
            AxisMap {
                a: s,
                b: -self.crop_origin.1 + self.translation.1,
            },
        )
    }

    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (mx, my) = self.axis_maps();
        (mx.apply(x), my.apply(y))
    }

    pub fn unmap_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (mx, my) = self.axis_maps();
        (mx.unapply(x), my.unapply(y))
    }

    /// Canonical record (translation folded into the crop origin) realizing
    /// the given affine maps.
    fn from_maps(
        src_frame: FrameId,
        dst_frame: FrameId,
        src_size: (usize, usize),
        crop_size: (usize, usize),
        mx: AxisMap,
        my: AxisMap,
        reflect_pad: bool,
    ) -> Self {
        let flip_h = mx.a < 0.0;
        let scale = mx.a.abs();
        let flip_off = if flip_h { scale * src_size.0 as f64 } else { 0.0 };
        Self {
            src_frame,
            dst_frame,
            src_size,
            scale,
            flip_h,
            crop_origin: (flip_off - mx.b, -my.b),
            crop_size,
            translation: (0.0, 0.0),
            reflect_pad,
        }
    }

    /// `second ∘ self`: apply `self`, then `second`.
    pub fn then(&self, second: &GeoRecord) -> Result<GeoRecord> {
        if second.src_frame != self.dst_frame {
            return Err(NsaError::FrameMismatch {
                labels: self.dst_frame.0,
                record: second.src_frame.0,
            });
        }
        let (ax1, ay1) = self.axis_maps();
        let (ax2, ay2) = second.axis_maps();
        let mx = AxisMap {
            a: ax2.a * ax1.a,
            b: ax2.a * ax1.b + ax2.b,
        };
        let my = AxisMap {
            a: ay2.a * ay1.a,
            b: ay2.a * ay1.b + ay2.b,
        };
        Ok(Self::from_maps(
            self.src_frame,
            second.dst_frame,
            self.src_size,
            second.crop_size,
            mx,
            my,
            self.reflect_pad || second.reflect_pad,
        ))
    }

    /// Largest absolute difference over every numeric field.
    pub fn max_field_diff(&self, other: &GeoRecord) -> f64 {
        let mut d: f64 = 0.0;
        d = d.max((self.scale - other.scale).abs());
        d = d.max((self.crop_origin.0 - other.crop_origin.0).abs());
        d = d.max((self.crop_origin.1 - other.crop_origin.1).abs());
        d = d.max((self.translation.0 - other.translation.0).abs());
        d = d.max((self.translation.1 - other.translation.1).abs());
        if self.flip_h != other.flip_h || self.crop_size != other.crop_size || self.src_size != other.src_size {
            d = f64::INFINITY;
        }
        d
    }
}

/// The record mapping `rec`'s output frame back onto its source frame.
pub fn invert_geo(rec: &GeoRecord) -> GeoRecord {
    let (mx, my) = rec.axis_maps();
    let inv = |m: AxisMap| AxisMap {
        a: 1.0 / m.a,
        b: -m.b / m.a,
    };
    GeoRecord::from_maps(
        rec.dst_frame,
        rec.src_frame,
        rec.crop_size,
        rec.src_size,
        inv(mx),
        inv(my),
        true,
    )
}

/// Move boxes into `rec`'s output frame, clipping to the window and dropping
/// boxes whose clipped area is below `min_area_px`. The gate only removes
/// what the crop destroyed: a box that is already smaller than the gate
/// survives as long as clipping leaves it intact.
pub fn transform_labels_with(rec: &GeoRecord, labels: &LabelSet, min_area_px: f64) -> Result<LabelSet> {
    if labels.frame != rec.src_frame {
        return Err(NsaError::FrameMismatch {
            labels: labels.frame.0,
            record: rec.src_frame.0,
        });
    }
    let (mx, my) = rec.axis_maps();
    let (cw, ch) = (rec.crop_size.0 as f64, rec.crop_size.1 as f64);
    let mut out = Vec::with_capacity(labels.boxes.len());
    for b in &labels.boxes {
        let (xa, xb) = (mx.apply(b.x_min), mx.apply(b.x_max));
        let (ya, yb) = (my.apply(b.y_min), my.apply(b.y_max));
        let clipped = BBox {
            x_min: xa.min(xb).clamp(0.0, cw),
            x_max: xa.max(xb).clamp(0.0, cw),
            y_min: ya.min(yb).clamp(0.0, ch),
            y_max: ya.max(yb).clamp(0.0, ch),
            ..*b
        };
        let full = (xb - xa).abs() * (yb - ya).abs();
        if clipped.is_valid() && clipped.area() >= min_area_px.min(full) {
            out.push(clipped);
        }
    }
    Ok(LabelSet::new(rec.dst_frame, labels.kind, out))
}

pub fn transform_labels(rec: &GeoRecord, labels: &LabelSet) -> Result<LabelSet> {
    transform_labels_with(rec, labels, DEFAULT_MIN_AREA_PX)
}

/// Warp `img` through `rec` with bilinear resampling; attached labels follow.
pub fn apply_geo(rec: &GeoRecord, img: &ImageSample) -> Result<ImageSample> {
    rec.validate()?;
    if img.frame != rec.src_frame {
        return Err(NsaError::FrameMismatch {
            labels: img.frame.0,
            record: rec.src_frame.0,
        });
    }
    if (img.width(), img.height()) != rec.src_size {
        return Err(NsaError::InvalidGeo(format!(
            "image is {}x{}, record expects {:?}",
            img.width(),
            img.height(),
            rec.src_size
        )));
    }
    rec.check_window()?;
    let pixels = if rec.is_identity() {
        Arc::clone(&img.pixels)
    } else {
        Arc::new(warp_image(rec, &img.pixels))
    };
    let labels = match &img.labels {
        Some(l) => Some(transform_labels(rec, l)?),
        None => None,
    };
    Ok(ImageSample {
        pixels,
        domain: img.domain,
        labels,
        frame: rec.dst_frame,
    })
}

fn warp_image(rec: &GeoRecord, src: &Image) -> Image {
    let (mx, my) = rec.axis_maps();
    let (w, h) = rec.crop_size;
    let mut out = Image::new(w, h);
    for v in 0..h {
        let sy = my.unapply(v as f64 + 0.5);
        for u in 0..w {
            let sx = mx.unapply(u as f64 + 0.5);
            for c in 0..3 {
                out.set(c, v, u, src.sample(c, sx, sy));
            }
        }
    }
    out
}

/// 64-bit FNV-1a, used for stable frame identifiers.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }

    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
