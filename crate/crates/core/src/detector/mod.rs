//! The detector contract and the data it produces.
//!
//! A detector is an architecture; its weights live in a [`ParamSet`] so the
//! teacher and the student can share one architecture with two parameter
//! sets. Forward passes are recorded on a [`Tape`]; [`Detector::eval`] runs
//! one on a scratch tape and returns plain tensors.

mod toy;

pub use toy::{box_deltas, ToyDetector, ToyDetectorConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::geometry::{BBox, FrameId, LabelKind, LabelSet};
use crate::tensor::Tensor;

/// Output categories of a pixel-level prediction layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixCategory {
    Class,
    Box,
    Centerness,
}

impl PixCategory {
    pub const ALL: [PixCategory; 3] = [PixCategory::Class, PixCategory::Box, PixCategory::Centerness];
}

/// Output categories of the instance head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InsCategory {
    Class,
    Box,
}

impl InsCategory {
    pub const ALL: [InsCategory; 2] = [InsCategory::Class, InsCategory::Box];
}

/// One pyramid level. Maps are NCHW; `class` holds pre-sigmoid logits,
/// `boxes` holds nonnegative `(left, top, right, bottom)` distances in input
/// pixels, `centerness` holds one logit channel.
#[derive(Clone, Debug)]
pub struct LevelOutputs<T> {
    pub features: T,
    pub class: T,
    pub boxes: T,
    pub centerness: T,
}

impl<T> LevelOutputs<T> {
    pub fn category(&self, c: PixCategory) -> &T {
        match c {
            PixCategory::Class => &self.class,
            PixCategory::Box => &self.boxes,
            PixCategory::Centerness => &self.centerness,
        }
    }
}

/// Region of interest in input pixels of image `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub bbox: BBox,
}

/// Instance head outputs, one row per kept roi.
#[derive(Clone, Debug)]
pub struct InstanceOutputs<T> {
    /// `[r, d]` pooled-and-projected instance features.
    pub features: T,
    /// `[r, classes + 1]` logits; column 0 is background.
    pub class: T,
    /// `[r, 4]` box deltas `(dx, dy, dw, dh)` relative to the roi.
    pub boxes: T,
    /// Rois after clipping to the image.
    pub rois: Vec<Roi>,
    /// `kept[i]` is the index in the caller's roi list of output row `i`.
    pub kept: Vec<usize>,
}

impl<T> InstanceOutputs<T> {
    pub fn category(&self, c: InsCategory) -> &T {
        match c {
            InsCategory::Class => &self.class,
            InsCategory::Box => &self.boxes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectorOutputs<T> {
    pub levels: Vec<LevelOutputs<T>>,
    pub instance: Option<InstanceOutputs<T>>,
    pub strides: Vec<usize>,
}

impl<T> DetectorOutputs<T> {
    /// 1 when an instance-level head produced outputs.
    pub fn rho(&self) -> bool {
        self.instance.is_some()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DetectorOutputs<U> {
        DetectorOutputs {
            levels: self
                .levels
                .iter()
                .map(|l| LevelOutputs {
                    features: f(&l.features),
                    class: f(&l.class),
                    boxes: f(&l.boxes),
                    centerness: f(&l.centerness),
                })
                .collect(),
            instance: self.instance.as_ref().map(|i| InstanceOutputs {
                features: f(&i.features),
                class: f(&i.class),
                boxes: f(&i.boxes),
                rois: i.rois.clone(),
                kept: i.kept.clone(),
            }),
            strides: self.strides.clone(),
        }
    }
}

pub type OutputValues = DetectorOutputs<Tensor>;

impl DetectorOutputs<Var> {
    pub fn values(&self, tape: &Tape) -> OutputValues {
        self.map(|v| tape.value(*v).clone())
    }
}

/// Named parameter arrays in a stable order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Register every array as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Register every array as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        assert!(self.same_layout(other));
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Which pyramid level owns a box: level `i` takes boxes whose longer side
/// lies in `[bounds[i-1], bounds[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRule {
    pub bounds: Vec<f64>,
}

impl LevelRule {
    pub fn level_for(&self, b: &BBox) -> usize {
        let side = b.longer_side();
        self.bounds.iter().position(|&t| side < t).unwrap_or(self.bounds.len())
    }
}

impl Default for LevelRule {
    fn default() -> Self {
        Self { bounds: vec![32.0] }
    }
}

pub trait Detector {
    fn num_classes(&self) -> usize;

    fn strides(&self) -> &[usize];

    fn has_instance_head(&self) -> bool;

    fn level_rule(&self) -> &LevelRule;

    /// Fresh parameters, deterministic in `seed`.
    fn init_params(&self, seed: u64) -> ParamSet;

    /// Record a forward pass of `images [n, 3, h, w]`. `params` are the
    /// tape handles of a [`ParamSet`] produced by [`Detector::init_params`].
    fn forward(&self, tape: &mut Tape, params: &[Var], images: &Tensor, rois: Option<&[Roi]>) -> DetectorOutputs<Var>;

    /// Forward pass without gradient tracking.
    fn eval(&self, params: &ParamSet, images: &Tensor, rois: Option<&[Roi]>) -> OutputValues {
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let out = self.forward(&mut tape, &vars, images, rois);
        out.values(&tape)
    }
}

/// Center of grid cell `(i, j)` at `stride`, in input pixels.
#[inline]
pub fn cell_center(i: usize, j: usize, stride: usize) -> (f64, f64) {
    ((j as f64 + 0.5) * stride as f64, (i as f64 + 0.5) * stride as f64)
}

/// Score, threshold and class-wise NMS the pixel predictions of image `n`.
pub fn decode_detections(
    outputs: &OutputValues,
    n: usize,
    frame: FrameId,
    score_thresh: f64,
    nms_iou: f64,
    max_detections: usize,
) -> LabelSet {
    let mut cands = Vec::new();
    for (level, &stride) in outputs.levels.iter().zip(&outputs.strides) {
        let (_, classes, h, w) = level.class.dims4();
        let (img_w, img_h) = ((w * stride) as f64, (h * stride) as f64);
        for i in 0..h {
            for j in 0..w {
                let ctr = sigmoid(level.centerness.at4(n, 0, i, j));
                let (cx, cy) = cell_center(i, j, stride);
                for c in 0..classes {
                    let score = sigmoid(level.class.at4(n, c, i, j)) * ctr;
                    if score < score_thresh {
                        continue;
                    }
                    let d = |k| level.boxes.at4(n, k, i, j);
                    let b = BBox {
                        x_min: (cx - d(0)).clamp(0.0, img_w),
                        y_min: (cy - d(1)).clamp(0.0, img_h),
                        x_max: (cx + d(2)).clamp(0.0, img_w),
                        y_max: (cy + d(3)).clamp(0.0, img_h),
                        class_id: c,
                        score,
                    };
                    if b.is_valid() {
                        cands.push(b);
                    }
                }
            }
        }
    }
    let mut kept = nms(cands, nms_iou);
    kept.truncate(max_detections);
    LabelSet::new(frame, LabelKind::Pseudo, kept)
}

/// Greedy class-wise non-maximum suppression; output sorted by score.
pub fn nms(mut boxes: Vec<BBox>, iou_thresh: f64) -> Vec<BBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<BBox> = Vec::new();
    for b in boxes {
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || k.iou(&b) <= iou_thresh)
        {
            kept.push(b);
        }
    }
    kept
}
