//! Detection loss and the consistency objectives.
//!
//! Every function here records onto the student's tape. Teacher quantities
//! arrive as plain tensors (already evaluated, already registered into the
//! student frame by [`align_maps`]) so no gradient can reach the teacher.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{IouCell, Tape, Var};
use crate::detector::{box_deltas, cell_center, DetectorOutputs, InsCategory, LevelRule, OutputValues, PixCategory, Roi};
use crate::geometry::{reflect_coord, BBox, GeoRecord, LabelSet};
use crate::tensor::Tensor;
use crate::weightmaps::{assign_cells, WeightBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma_hid: f64,
    pub gamma_lid: f64,
    pub gamma_insd: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    /// Training rois at or above this IoU with a box take its class.
    pub roi_fg_iou: f64,
    /// Cells inside a box that another level owns are left out of the
    /// classification loss instead of counting as background.
    pub ignore_cross_level: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma_hid: 1.0,
            gamma_lid: 0.006,
            gamma_insd: 0.001,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            roi_fg_iou: 0.5,
            ignore_cross_level: true,
        }
    }
}

/// Dense pixel-head targets of one pyramid level for a batch.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    /// One-hot `[n, C, h, w]`; −1 marks ignored cells.
    pub class: Tensor,
    /// `[n, 1, h, w]`, meaningful where `fg` is 1.
    pub centerness: Tensor,
    pub fg: Tensor,
    pub cells: Vec<IouCell>,
}

impl LevelTargets {
    pub fn num_fg(&self) -> usize {
        self.cells.len()
    }
}

pub fn centerness_target(d: [f64; 4]) -> f64 {
    let [l, t, r, b] = d;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Foreground assignment and regression targets for a `[n, *, h, w]` level
/// whose box predictions live in a tensor of the same spatial shape.
pub fn level_targets(
    labels: &[LabelSet],
    num_classes: usize,
    shape: (usize, usize),
    stride: usize,
    level: usize,
    rule: &LevelRule,
) -> LevelTargets {
    let n = labels.len();
    let (h, w) = shape;
    let mut class = Tensor::zeros(&[n, num_classes, h, w]);
    let mut centerness = Tensor::zeros(&[n, 1, h, w]);
    let mut fg = Tensor::zeros(&[n, 1, h, w]);
    let mut cells = Vec::new();
    for (b, lab) in labels.iter().enumerate() {
        let owner = assign_cells(lab, shape, stride, level, rule);
        for i in 0..h {
            for j in 0..w {
                let Some(k) = owner[i * w + j] else { continue };
                let bx = lab.boxes[k];
                let (x, y) = cell_center(i, j, stride);
                let d = [x - bx.x_min, y - bx.y_min, bx.x_max - x, bx.y_max - y];
                let ci = class.idx4(b, bx.class_id, i, j);
                class.data_mut()[ci] = 1.0;
                let fi = fg.idx4(b, 0, i, j);
                fg.data_mut()[fi] = 1.0;
                centerness.data_mut()[fi] = centerness_target(d);
                let base = |k: usize| ((b * 4 + k) * h + i) * w + j;
                cells.push(IouCell {
                    index: [base(0), base(1), base(2), base(3)],
                    target: d,
                });
            }
        }
    }
    LevelTargets {
        class,
        centerness,
        fg,
        cells,
    }
}

/// Mark background cells of a level that fall inside some box as ignored.
pub fn ignore_cross_level(t: &mut LevelTargets, labels: &[LabelSet], stride: usize) {
    let (_, classes, h, w) = t.class.dims4();
    let any_level = LevelRule { bounds: vec![] };
    for (b, lab) in labels.iter().enumerate() {
        let owner = assign_cells(lab, (h, w), stride, 0, &any_level);
        for i in 0..h {
            for j in 0..w {
                if owner[i * w + j].is_none() || t.fg.at4(b, 0, i, j) > 0.0 {
                    continue;
                }
                for c in 0..classes {
                    let k = t.class.idx4(b, c, i, j);
                    t.class.data_mut()[k] = -1.0;
                }
            }
        }
    }
}

/// Rois for supervising the instance head: every box, jittered copies that
/// stay foreground, far shifts that become background, and a fixed
/// background grid.
pub fn training_rois(labels: &[LabelSet], image_size: (usize, usize)) -> Vec<Roi> {
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut rois = Vec::new();
    for (batch, lab) in labels.iter().enumerate() {
        for b in &lab.boxes {
            let (w, h) = (b.width(), b.height());
            for (fx, fy) in [(0.0, 0.0), (0.15, 0.1), (-0.1, -0.15), (0.6, 0.0), (0.0, -0.6)] {
                let shifted = BBox {
                    x_min: b.x_min + fx * w,
                    x_max: b.x_max + fx * w,
                    y_min: b.y_min + fy * h,
                    y_max: b.y_max + fy * h,
                    ..*b
                };
                rois.push(Roi { batch, bbox: shifted });
            }
        }
        let side = (iw.min(ih) / 3.0).floor();
        for gy in 0..3 {
            for gx in 0..3 {
                let (x, y) = (gx as f64 * iw / 3.0, gy as f64 * ih / 3.0);
                rois.push(Roi {
                    batch,
                    bbox: BBox::new(x, y, x + side, y + side, 0),
                });
            }
        }
    }
    rois
}

/// Class (0 = background) and delta targets of pooled rois.
pub fn instance_targets(rois: &[Roi], labels: &[LabelSet], fg_iou: f64) -> (Vec<usize>, Tensor, Tensor) {
    let r = rois.len();
    let mut classes = vec![0; r];
    let mut deltas = Tensor::zeros(&[r, 4]);
    let mut weights = Tensor::zeros(&[r, 4]);
    for (i, roi) in rois.iter().enumerate() {
        let best = labels[roi.batch]
            .boxes
            .iter()
            .map(|g| (roi.bbox.iou(g), g))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((iou, g)) = best {
            if iou >= fg_iou {
                classes[i] = g.class_id + 1;
                let d = box_deltas(&roi.bbox, g);
                deltas.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&d);
                weights.data_mut()[i * 4..i * 4 + 4].fill(1.0);
            }
        }
    }
    (classes, deltas, weights)
}

/// Classification and regression parts of the detection loss.
#[derive(Clone, Copy, Debug)]
pub struct DetLoss {
    pub cls: Var,
    pub reg: Var,
    pub num_fg: usize,
    pub num_rois: usize,
}

/// Focal classification, centerness BCE and IoU regression over the pixel
/// head, normalized by the foreground cell count; plus cross-entropy and
/// smooth-L1 over the instance head when it ran.
pub fn det_loss(
    tape: &mut Tape,
    out: &DetectorOutputs<Var>,
    labels: &[LabelSet],
    rule: &LevelRule,
    cfg: &LossConfig,
) -> DetLoss {
    let mut targets = Vec::with_capacity(out.levels.len());
    for (level, (lv, &stride)) in out.levels.iter().zip(&out.strides).enumerate() {
        let (_, classes, h, w) = tape.value(lv.class).dims4();
        let mut t = level_targets(labels, classes, (h, w), stride, level, rule);
        if cfg.ignore_cross_level {
            ignore_cross_level(&mut t, labels, stride);
        }
        targets.push(t);
    }
    let num_fg: usize = targets.iter().map(|t| t.num_fg()).sum();
    let norm = 1.0 / num_fg.max(1) as f64;

    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    for (lv, t) in out.levels.iter().zip(targets) {
        let focal = tape.sigmoid_focal(lv.class, t.class, cfg.focal_alpha, cfg.focal_gamma);
        cls_terms.push((focal, norm));
        let ctr = tape.bce_logits(lv.centerness, t.centerness, t.fg);
        cls_terms.push((ctr, norm));
        let iou = tape.iou_loss(lv.boxes, t.cells);
        reg_terms.push((iou, norm));
    }

    let mut num_rois = 0;
    if let Some(ins) = &out.instance {
        let (classes, deltas, weights) = instance_targets(&ins.rois, labels, cfg.roi_fg_iou);
        num_rois = classes.len();
        let fg_rois = classes.iter().filter(|&&c| c > 0).count();
        let ce = tape.softmax_ce(ins.class, classes, vec![1.0; num_rois]);
        cls_terms.push((ce, 1.0 / num_rois.max(1) as f64));
        let sl1 = tape.smooth_l1(ins.boxes, deltas, weights, cfg.smooth_l1_beta);
        reg_terms.push((sl1, 1.0 / fg_rois.max(1) as f64));
    }
    DetLoss {
        cls: tape.weighted_sum(&cls_terms),
        reg: tape.weighted_sum(&reg_terms),
        num_fg,
        num_rois,
    }
}

/// The heavy-view term is the detection loss of the student on the heavy
/// view against labels moved into that view.
pub fn eca_hid(
    tape: &mut Tape,
    student_on_hid: &DetectorOutputs<Var>,
    labels_in_hid: &[LabelSet],
    rule: &LevelRule,
    cfg: &LossConfig,
) -> DetLoss {
    det_loss(tape, student_on_hid, labels_in_hid, rule, cfg)
}

/// Bilinear sample of a `[h, w]` plane at grid coordinates where cell `k`
/// spans `[k, k + 1]`; reflected outside, clamped in the half-cell margin.
fn sample_plane(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = (reflect_coord(x, w as f64) - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (reflect_coord(y, h as f64) - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Warp `[n, c, h, w]` maps defined on the source grid of `geos[b]` onto a
/// `target` grid of the same stride in each record's output frame.
fn warp_level(map: &Tensor, geos: &[GeoRecord], stride: usize, target: (usize, usize)) -> Tensor {
    let (n, c, h, w) = map.dims4();
    let (th, tw) = target;
    let mut out = Tensor::zeros(&[n, c, th, tw]);
    let s = stride as f64;
    for (b, geo) in geos.iter().enumerate().take(n) {
        for i in 0..th {
            for j in 0..tw {
                let (px, py) = cell_center(i, j, stride);
                let (qx, qy) = geo.unmap_point(px, py);
                for ch in 0..c {
                    let start = (b * c + ch) * h * w;
                    let v = sample_plane(&map.data()[start..start + h * w], h, w, qx / s, qy / s);
                    let o = out.idx4(b, ch, i, j);
                    out.data_mut()[o] = v;
                }
            }
        }
    }
    out
}

/// Register teacher pixel maps (predictions and features) into the
/// student's disturbed frames. Box distances are rescaled and mirrored
/// with the geometry; class and centerness maps are resampled as is.
/// `targets[l]` is the student grid of level `l`.
pub fn align_maps(teacher: &OutputValues, geos: &[GeoRecord], targets: &[(usize, usize)]) -> OutputValues {
    let levels = teacher
        .levels
        .iter()
        .zip(&teacher.strides)
        .zip(targets)
        .map(|((lv, &stride), &tgt)| {
            let mut boxes = warp_level(&lv.boxes, geos, stride, tgt);
            let (n, _, th, tw) = boxes.dims4();
            for (b, geo) in geos.iter().enumerate().take(n) {
                for i in 0..th {
                    for j in 0..tw {
                        let idx = |k| boxes.idx4(b, k, i, j);
                        let (il, ir) = (idx(0), idx(2));
                        let d = boxes.data_mut();
                        if geo.flip_h {
                            d.swap(il, ir);
                        }
                        for k in 0..4 {
                            d[((b * 4 + k) * th + i) * tw + j] *= geo.scale;
                        }
                    }
                }
            }
            crate::detector::LevelOutputs {
                features: warp_level(&lv.features, geos, stride, tgt),
                class: warp_level(&lv.class, geos, stride, tgt),
                boxes,
                centerness: warp_level(&lv.centerness, geos, stride, tgt),
            }
        })
        .collect();
    let instance = teacher.instance.as_ref().map(|ins| {
        let mut ins = ins.clone();
        let (r, _) = ins.boxes.dims2();
        for k in 0..r {
            if geos[ins.rois[k].batch].flip_h {
                ins.boxes.data_mut()[k * 4] *= -1.0;
            }
        }
        ins
    });
    crate::detector::DetectorOutputs {
        levels,
        instance,
        strides: teacher.strides.clone(),
    }
}

/// Broadcast a per-image `[h, w]` mask over `channels` into the batch slot
/// `b` of an `[n, channels, h, w]` weight tensor.
fn batch_weights(mask: &Tensor, b: usize, shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(b < n);
    assert_eq!(mask.shape(), &[h, w], "mask grid");
    let mut out = Tensor::zeros(shape);
    for ch in 0..c {
        let start = (b * c + ch) * h * w;
        out.data_mut()[start..start + h * w].copy_from_slice(mask.data());
    }
    out
}

/// Weights selecting the rows of image `b` in an `[r, k]` instance tensor.
fn row_weights(rois: &[Roi], per_roi: &[f64], b: usize, k: usize) -> (Tensor, f64) {
    let mut w = Tensor::zeros(&[rois.len(), k]);
    let mut total = 0.0;
    for (i, roi) in rois.iter().enumerate() {
        if roi.batch == b && per_roi[i] != 0.0 {
            w.data_mut()[i * k..(i + 1) * k].fill(per_roi[i]);
            total += per_roi[i];
        }
    }
    (w, total)
}

/// `Σ_b ||mask_b ⊙ (teacher − student)||₂ / ||mask_b||₁`, averaged over the
/// batch, for one pixel map. Empty masks contribute nothing.
fn masked_ratio_pix(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    masks: &[&Tensor],
    terms: &mut Vec<(Var, f64)>,
) {
    let shape = tape.value(student).shape().to_vec();
    assert_eq!(teacher.shape(), &shape[..], "teacher/student maps differ after alignment");
    let n = masks.len() as f64;
    for (b, mask) in masks.iter().enumerate() {
        let denom = mask.sum();
        if denom == 0.0 {
            continue;
        }
        let w = batch_weights(mask, b, &shape);
        let l2 = tape.masked_l2(student, teacher.clone(), w);
        terms.push((l2, 1.0 / (denom * n)));
    }
}

fn masked_ratio_ins(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    rois: &[Roi],
    per_roi: &[f64],
    batch: usize,
    terms: &mut Vec<(Var, f64)>,
) {
    let (_, k) = tape.value(student).dims2();
    assert_eq!(teacher.shape(), tape.value(student).shape(), "instance outputs differ");
    for b in 0..batch {
        let (w, denom) = row_weights(rois, per_roi, b, k);
        if denom == 0.0 {
            continue;
        }
        let l2 = tape.masked_l2(student, teacher.clone(), w);
        terms.push((l2, 1.0 / (denom * batch as f64)));
    }
}

fn sum_terms(tape: &mut Tape, terms: &[(Var, f64)]) -> Var {
    if terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        tape.weighted_sum(terms)
    }
}

/// A consistency term split into its pixel and instance parts.
#[derive(Clone, Copy, Debug)]
pub struct SplitTerm {
    pub pix: Var,
    pub ins: Var,
}

/// Prediction consistency under the light view, masked by foreground.
/// `bundles[b]` holds image `b`'s masks; instance rows are gated by `a_ins`
/// indexed like the student's kept rois.
pub fn eca_lid(
    tape: &mut Tape,
    teacher: &OutputValues,
    student: &DetectorOutputs<Var>,
    bundles: &[WeightBundle],
) -> SplitTerm {
    let mut pix = Vec::new();
    for (l, (sl, tl)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        let masks: Vec<&Tensor> = bundles.iter().map(|wb| &wb.layers[l].a).collect();
        for c in PixCategory::ALL {
            masked_ratio_pix(tape, *sl.category(c), tl.category(c), &masks, &mut pix);
        }
    }
    let mut ins = Vec::new();
    if let (Some(si), Some(ti)) = (&student.instance, &teacher.instance) {
        let per_roi = flatten_instance(bundles, |wb| &wb.a_ins);
        for c in InsCategory::ALL {
            masked_ratio_ins(tape, *si.category(c), ti.category(c), &si.rois, &per_roi, bundles.len(), &mut ins);
        }
    }
    SplitTerm {
        pix: sum_terms(tape, &pix),
        ins: sum_terms(tape, &ins),
    }
}

/// Feature consistency under the light view at sampled texture centers.
pub fn ica_lid(
    tape: &mut Tape,
    teacher: &OutputValues,
    student: &DetectorOutputs<Var>,
    bundles: &[WeightBundle],
) -> SplitTerm {
    let mut pix = Vec::new();
    for (l, (sl, tl)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        let masks: Vec<&Tensor> = bundles.iter().map(|wb| &wb.layers[l].b).collect();
        masked_ratio_pix(tape, sl.features, &tl.features, &masks, &mut pix);
    }
    let mut ins = Vec::new();
    if let (Some(si), Some(ti)) = (&student.instance, &teacher.instance) {
        let per_roi = flatten_instance(bundles, |wb| &wb.b_ins);
        masked_ratio_ins(tape, si.features, &ti.features, &si.rois, &per_roi, bundles.len(), &mut ins);
    }
    SplitTerm {
        pix: sum_terms(tape, &pix),
        ins: sum_terms(tape, &ins),
    }
}

/// Per-roi weights in batch order: image 0's rois first, then image 1's...
fn flatten_instance(bundles: &[WeightBundle], f: impl Fn(&WeightBundle) -> &Vec<f64>) -> Vec<f64> {
    bundles.iter().flat_map(|wb| f(wb).iter().copied()).collect()
}

/// The pieces of one optimization step; absent pieces count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveTerms {
    pub det: Option<DetLoss>,
    pub eca_hid: Option<DetLoss>,
    pub eca_lid: Option<SplitTerm>,
    pub ica_lid: Option<SplitTerm>,
    pub ica_insd: Option<Var>,
    /// 1 when the instance head contributed.
    pub rho: bool,
}

pub const COMPONENTS: [&str; 8] = [
    "det_cls",
    "det_reg",
    "eca_hid",
    "eca_lid_pix",
    "eca_lid_ins",
    "ica_lid_pix",
    "ica_lid_ins",
    "ica_insd",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub stage: String,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

impl LossReport {
    /// Recompute the total from the components and the weights.
    pub fn reassemble(&self, cfg: &LossConfig) -> f64 {
        let c = |k: &str| self.components.get(k).copied().unwrap_or(0.0);
        c("det_cls")
            + c("det_reg")
            + cfg.gamma_hid * c("eca_hid")
            + cfg.gamma_lid * (c("eca_lid_pix") + c("eca_lid_ins") + c("ica_lid_pix") + c("ica_lid_ins"))
            + cfg.gamma_insd * c("ica_insd")
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// `det + γ_HID·ECA_HID + γ_LID·(ECA_LID + ICA_LID) + γ_InsD·ICA_InsD`.
pub fn total_objective(tape: &mut Tape, terms: &ObjectiveTerms, cfg: &LossConfig) -> (Var, LossReport) {
    let rho = if terms.rho { 1.0 } else { 0.0 };
    let mut parts: Vec<(&str, Option<Var>, f64)> = Vec::new();
    parts.push(("det_cls", terms.det.map(|d| d.cls), 1.0));
    parts.push(("det_reg", terms.det.map(|d| d.reg), 1.0));
    let hid = terms.eca_hid.map(|d| tape.add(d.cls, d.reg));
    parts.push(("eca_hid", hid, cfg.gamma_hid));
    parts.push(("eca_lid_pix", terms.eca_lid.map(|t| t.pix), cfg.gamma_lid));
    parts.push(("eca_lid_ins", terms.eca_lid.map(|t| t.ins), cfg.gamma_lid * rho));
    parts.push(("ica_lid_pix", terms.ica_lid.map(|t| t.pix), cfg.gamma_lid));
    parts.push(("ica_lid_ins", terms.ica_lid.map(|t| t.ins), cfg.gamma_lid * rho));
    parts.push(("ica_insd", terms.ica_insd, cfg.gamma_insd));

    let mut components = BTreeMap::new();
    let mut sum = Vec::new();
    for (name, var, weight) in parts {
        let v = var.map_or(0.0, |v| tape.value(v).item());
        // the instance parts are reported as computed; rho gates their weight
        components.insert(name.to_string(), v);
        if let Some(var) = var {
            if weight != 0.0 {
                sum.push((var, weight));
            }
        }
    }
    let total = sum_terms(tape, &sum);
    let mut counts = BTreeMap::new();
    if let Some(d) = terms.det.or(terms.eca_hid) {
        counts.insert("foreground_cells".to_string(), d.num_fg);
        counts.insert("instance_rois".to_string(), d.num_rois);
    }
    let report = LossReport {
        iteration: 0,
        stage: String::new(),
        total: tape.value(total).item(),
        components,
        counts,
    };
    (total, report)
}
