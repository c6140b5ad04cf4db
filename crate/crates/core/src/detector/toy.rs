//! A small anchor-free detector: a strided conv backbone with two pyramid
//! levels (strides 4 and 8), a shared class/box/centerness head, and an
//! optional instance head that pools 7×7 regions from the same pyramid
//! features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Detector, DetectorOutputs, InstanceOutputs, LevelOutputs, LevelRule, ParamSet, Roi};
use crate::autodiff::{GatherEntry, Tape, Var};
use crate::geometry::BBox;
use crate::tensor::Tensor;

const STRIDES: [usize; 2] = [4, 8];
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorConfig {
    pub num_classes: usize,
    pub stem_width: usize,
    pub width: usize,
    pub instance_head: bool,
    pub instance_dim: usize,
    pub pool_size: usize,
    pub level_rule: LevelRule,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            stem_width: 16,
            width: 32,
            instance_head: true,
            instance_dim: 64,
            pool_size: 7,
            level_rule: LevelRule::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyDetector {
    cfg: ToyDetectorConfig,
}

// parameter slots, in ParamSet order
const CONV1: usize = 0;
const CONV2: usize = 2;
const CONV3: usize = 4;
const CONV4: usize = 6;
const TOWER: usize = 8;
const CLS: usize = 10;
const BOX: usize = 12;
const CTR: usize = 14;
const INS_FC: usize = 16;
const INS_CLS: usize = 18;
const INS_BOX: usize = 20;

impl ToyDetector {
    pub fn new(cfg: ToyDetectorConfig) -> Self {
        assert!(cfg.num_classes > 0 && cfg.width > 0 && cfg.pool_size > 0);
        Self { cfg }
    }

    pub fn config(&self) -> &ToyDetectorConfig {
        &self.cfg
    }

    fn pad_images(images: &Tensor, multiple: usize) -> Tensor {
        let (n, c, h, w) = images.dims4();
        let ph = h.div_ceil(multiple) * multiple;
        let pw = w.div_ceil(multiple) * multiple;
        if (ph, pw) == (h, w) {
            return images.clone();
        }
        let mut out = Tensor::zeros(&[n, c, ph, pw]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let dst = out.idx4(b, ch, y, x);
                        out.data_mut()[dst] = images.at4(b, ch, y, x);
                    }
                }
            }
        }
        out
    }

    /// Bilinear 7×7 (by default) region sampling of level `level` for the
    /// rois the level rule assigns to it.
    fn roi_entries(&self, rois: &[Roi], level: usize, feat: &Tensor, stride: usize) -> Vec<GatherEntry> {
        let (_, c, h, w) = feat.dims4();
        let p = self.cfg.pool_size;
        let row = c * p * p;
        let mut entries = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            if self.cfg.level_rule.level_for(&roi.bbox) != level {
                continue;
            }
            let b = roi.bbox;
            let bw = b.width() / p as f64;
            let bh = b.height() / p as f64;
            for by in 0..p {
                for bx in 0..p {
                    let sx = b.x_min + (bx as f64 + 0.5) * bw;
                    let sy = b.y_min + (by as f64 + 0.5) * bh;
                    let fx = (sx / stride as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                    let fy = (sy / stride as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                    let corners = [
                        (y0, x0, (1.0 - ax) * (1.0 - ay)),
                        (y0, x1, ax * (1.0 - ay)),
                        (y1, x0, (1.0 - ax) * ay),
                        (y1, x1, ax * ay),
                    ];
                    for ch in 0..c {
                        let out = r * row + ch * p * p + by * p + bx;
                        for &(y, x, wgt) in &corners {
                            if wgt != 0.0 {
                                entries.push(GatherEntry {
                                    out_index: out as u32,
                                    in_index: feat.idx4(roi.batch, ch, y, x) as u32,
                                    weight: wgt,
                                });
                            }
                        }
                    }
                }
            }
        }
        entries
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

impl Detector for ToyDetector {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn strides(&self) -> &[usize] {
        &STRIDES
    }

    fn has_instance_head(&self) -> bool {
        self.cfg.instance_head
    }

    fn level_rule(&self) -> &LevelRule {
        &self.cfg.level_rule
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, w, c) = (self.cfg.stem_width, self.cfg.width, self.cfg.num_classes);
        let mut p = ParamSet::new();
        let conv = |p: &mut ParamSet, name: &str, o: usize, i: usize, k: usize, rng: &mut ChaCha8Rng| {
            p.push(format!("{name}.weight"), kaiming(&[o, i, k, k], i * k * k, rng));
            p.push(format!("{name}.bias"), Tensor::zeros(&[o]));
        };
        conv(&mut p, "backbone.conv1", s, 3, 3, &mut rng);
        conv(&mut p, "backbone.conv2", w, s, 3, &mut rng);
        conv(&mut p, "backbone.conv3", w, w, 3, &mut rng);
        conv(&mut p, "backbone.conv4", w, w, 3, &mut rng);
        conv(&mut p, "head.tower", w, w, 3, &mut rng);
        p.push("head.cls.weight", normal(&[c, w, 1, 1], 0.01, &mut rng));
        p.push(
            "head.cls.bias",
            Tensor::full(&[c], -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()),
        );
        p.push("head.box.weight", normal(&[4, w, 1, 1], 0.01, &mut rng));
        p.push("head.box.bias", Tensor::zeros(&[4]));
        p.push("head.ctr.weight", normal(&[1, w, 1, 1], 0.01, &mut rng));
        p.push("head.ctr.bias", Tensor::zeros(&[1]));
        if self.cfg.instance_head {
            let d = self.cfg.instance_dim;
            let fan = w * self.cfg.pool_size * self.cfg.pool_size;
            p.push("instance.fc.weight", kaiming(&[d, fan], fan, &mut rng));
            p.push("instance.fc.bias", Tensor::zeros(&[d]));
            p.push("instance.cls.weight", normal(&[c + 1, d], 0.01, &mut rng));
            p.push("instance.cls.bias", Tensor::zeros(&[c + 1]));
            p.push("instance.box.weight", normal(&[4, d], 0.001, &mut rng));
            p.push("instance.box.bias", Tensor::zeros(&[4]));
        }
        p
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], images: &Tensor, rois: Option<&[Roi]>) -> DetectorOutputs<Var> {
        let (_, _, img_h, img_w) = images.dims4();
        let padded = Self::pad_images(images, STRIDES[1]);
        let x = tape.constant(padded);
        let conv = |tape: &mut Tape, x: Var, slot: usize, stride: usize, pad: usize| {
            tape.conv2d(x, params[slot], params[slot + 1], stride, pad)
        };
        let h = conv(tape, x, CONV1, 2, 1);
        let h = tape.relu(h);
        let h = conv(tape, h, CONV2, 2, 1);
        let h = tape.relu(h);
        let f0 = conv(tape, h, CONV3, 1, 1);
        let f0 = tape.relu(f0);
        let f1 = conv(tape, f0, CONV4, 2, 1);
        let f1 = tape.relu(f1);

        let mut levels = Vec::with_capacity(2);
        for (f, stride) in [(f0, STRIDES[0]), (f1, STRIDES[1])] {
            let t = conv(tape, f, TOWER, 1, 1);
            let t = tape.relu(t);
            let class = conv(tape, t, CLS, 1, 0);
            let raw_box = conv(tape, t, BOX, 1, 0);
            let sp = tape.softplus(raw_box);
            let boxes = tape.scale(sp, stride as f64);
            let centerness = conv(tape, t, CTR, 1, 0);
            levels.push(LevelOutputs {
                features: f,
                class,
                boxes,
                centerness,
            });
        }

        let instance = match (self.cfg.instance_head, rois) {
            (true, Some(rois)) => {
                let (iw, ih) = (img_w as f64, img_h as f64);
                let mut kept = Vec::new();
                let mut clipped = Vec::new();
                for (i, r) in rois.iter().enumerate() {
                    let b = BBox {
                        x_min: r.bbox.x_min.clamp(0.0, iw),
                        y_min: r.bbox.y_min.clamp(0.0, ih),
                        x_max: r.bbox.x_max.clamp(0.0, iw),
                        y_max: r.bbox.y_max.clamp(0.0, ih),
                        ..r.bbox
                    };
                    if b.is_valid() {
                        kept.push(i);
                        clipped.push(Roi { batch: r.batch, bbox: b });
                    }
                }
                let p = self.cfg.pool_size;
                let width = self.cfg.width;
                let out_shape = [clipped.len(), width * p * p];
                let mut pooled = Vec::new();
                for (lvl, (level, &stride)) in levels.iter().zip(&STRIDES).enumerate() {
                    let entries = self.roi_entries(&clipped, lvl, tape.value(level.features), stride);
                    if !entries.is_empty() {
                        pooled.push(tape.gather(level.features, entries, &out_shape));
                    }
                }
                let pooled = match pooled.len() {
                    0 => tape.gather(levels[0].features, Vec::new(), &out_shape),
                    1 => pooled[0],
                    _ => {
                        let terms: Vec<(Var, f64)> = pooled.iter().map(|&v| (v, 1.0)).collect();
                        tape.weighted_sum(&terms)
                    }
                };
                let hidden = tape.linear(pooled, params[INS_FC], params[INS_FC + 1]);
                let features = tape.relu(hidden);
                let class = tape.linear(features, params[INS_CLS], params[INS_CLS + 1]);
                let boxes = tape.linear(features, params[INS_BOX], params[INS_BOX + 1]);
                Some(InstanceOutputs {
                    features,
                    class,
                    boxes,
                    rois: clipped,
                    kept,
                })
            }
            _ => None,
        };

        DetectorOutputs {
            levels,
            instance,
            strides: STRIDES.to_vec(),
        }
    }
}

/// `(dx, dy, dw, dh)` regression target taking `roi` onto `gt`.
pub fn box_deltas(roi: &BBox, gt: &BBox) -> [f64; 4] {
    let (rw, rh) = (roi.width(), roi.height());
    let (rcx, rcy) = (roi.x_min + rw / 2.0, roi.y_min + rh / 2.0);
    let (gw, gh) = (gt.width(), gt.height());
    let (gcx, gcy) = (gt.x_min + gw / 2.0, gt.y_min + gh / 2.0);
    [(gcx - rcx) / rw, (gcy - rcy) / rh, (gw / rw).ln(), (gh / rh).ln()]
}
