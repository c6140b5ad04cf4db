//! Foreground masks, texture smoothness and the sampled weights that gate
//! the light-disturbance consistency terms.
//!
//! All maps are per image and per pyramid level, stored as `[h, w]`
//! tensors. Nothing here is differentiated: weights are computed from
//! teacher features and enter the losses as constants.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{cell_center, LevelRule};
use crate::error::{NsaError, Result};
use crate::geometry::LabelSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub eta1: f64,
    pub eta2: f64,
    /// Smoothness window side.
    pub r: usize,
    /// Center-sampling window side.
    pub psi_window: usize,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            eta1: 1.3,
            eta2: 1.6,
            r: 3,
            psi_window: 3,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 < self.eta2) {
            return Err(NsaError::Config(format!(
                "weights.eta1 ({}) must be below weights.eta2 ({})",
                self.eta1, self.eta2
            )));
        }
        if self.r < 3 || self.r % 2 == 0 {
            return Err(NsaError::Config(format!("weights.r must be odd and >= 3, got {}", self.r)));
        }
        if self.psi_window % 2 == 0 {
            return Err(NsaError::Config(format!(
                "weights.psi_window must be odd, got {}",
                self.psi_window
            )));
        }
        Ok(())
    }
}

/// Per-cell class ids shifted by one; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMatrix {
    pub h: usize,
    pub w: usize,
    pub data: Vec<usize>,
}

impl ClassMatrix {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> usize {
        self.data[i * self.w + j]
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Index of the smallest box that covers the center of each cell and that
/// the level rule assigns to `level`.
pub fn assign_cells(
    labels: &LabelSet,
    shape: (usize, usize),
    stride: usize,
    level: usize,
    rule: &LevelRule,
) -> Vec<Option<usize>> {
    let (h, w) = shape;
    let mut owner = vec![None; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    for (k, b) in labels.boxes.iter().enumerate() {
        if rule.level_for(b) != level {
            continue;
        }
        let area = b.area();
        for i in 0..h {
            for j in 0..w {
                let (x, y) = cell_center(i, j, stride);
                if b.contains(x, y) && area < best[i * w + j] {
                    best[i * w + j] = area;
                    owner[i * w + j] = Some(k);
                }
            }
        }
    }
    owner
}

/// Cell `(i, j)` takes the class of the box [`assign_cells`] gives it.
pub fn build_class_matrix(
    labels: &LabelSet,
    shape: (usize, usize),
    stride: usize,
    level: usize,
    rule: &LevelRule,
) -> ClassMatrix {
    let data = assign_cells(labels, shape, stride, level, rule)
        .into_iter()
        .map(|o| o.map_or(0, |k| labels.boxes[k].class_id + 1))
        .collect();
    ClassMatrix {
        h: shape.0,
        w: shape.1,
        data,
    }
}

pub fn foreground_mask(m: &ClassMatrix) -> Tensor {
    Tensor::from_vec(
        &[m.h, m.w],
        m.data.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect(),
    )
}

/// L1 distance (over channels) between each feature vector and its
/// `r × r` neighbourhood mean, min-max normalized to `[0, 1]`.
///
/// `features` is `[c, h, w]`.
pub fn smoothness(features: &Tensor, r: usize) -> Tensor {
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let f = features.data();
    let half = (r / 2) as isize;
    let inv = 1.0 / (r * r) as f64;
    let mut s = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &f[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in -half..=half {
                    let y = reflect101(i as isize + di, h);
                    for dj in -half..=half {
                        acc += plane[y * w + reflect101(j as isize + dj, w)];
                    }
                }
                s[i * w + j] += (plane[i * w + j] - acc * inv).abs();
            }
        }
    }
    min_max_normalize(&mut s);
    Tensor::from_vec(&[h, w], s)
}

fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let span = hi - lo;
    v.iter_mut().for_each(|x| *x = (*x - lo) / span);
}

/// Three-way texture class against the mean smoothness `s̄`:
/// 1.0 above `eta2·s̄`, 0.1 in `(eta1·s̄, eta2·s̄]`, else 0.
pub fn texture_weights(s: &Tensor, eta1: f64, eta2: f64) -> Tensor {
    let mean = s.sum() / s.len().max(1) as f64;
    let (lo, hi) = (eta1 * mean, eta2 * mean);
    s.map(|v| {
        if v > hi {
            1.0
        } else if v > lo {
            0.1
        } else {
            0.0
        }
    })
}

/// Keep `w_masked` at cells whose smoothness is a (possibly tied) maximum of
/// its `window × window` neighbourhood.
pub fn sample_centers_psi(w_masked: &Tensor, s: &Tensor, window: usize) -> Tensor {
    let (h, w) = s.dims2();
    assert_eq!(w_masked.shape(), s.shape());
    let half = (window / 2) as isize;
    let sd = s.data();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = w_masked.data()[i * w + j];
            if v == 0.0 {
                continue;
            }
            let center = sd[i * w + j];
            let is_max = (-half..=half).all(|di| {
                let y = reflect101(i as isize + di, h);
                (-half..=half).all(|dj| sd[y * w + reflect101(j as isize + dj, w)] <= center)
            });
            if is_max {
                out[i * w + j] = v;
            }
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Instance foreground indicator; the same vector serves as mask and weight.
pub fn instance_weights(m_ins: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = m_ins.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect();
    (a.clone(), a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub m: ClassMatrix,
    pub a: Tensor,
    pub s: Tensor,
    pub w_t: Tensor,
    pub b: Tensor,
}

/// All masks and weights of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub layers: Vec<LayerWeights>,
    pub m_ins: Vec<usize>,
    pub a_ins: Vec<f64>,
    pub b_ins: Vec<f64>,
}

/// Build the bundle of one image from teacher features already registered to
/// the labels' frame. `features[l]` is `[c, h, w]`; `m_ins` holds the
/// shifted class of every pooled roi.
pub fn build_weight_bundle(
    features: &[Tensor],
    labels: &LabelSet,
    strides: &[usize],
    rule: &LevelRule,
    cfg: &WeightConfig,
    m_ins: &[usize],
) -> WeightBundle {
    let layers = features
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(level, (f, &stride))| {
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let m = build_class_matrix(labels, (h, w), stride, level, rule);
            let a = foreground_mask(&m);
            let s = smoothness(f, cfg.r);
            let w_t = texture_weights(&s, cfg.eta1, cfg.eta2);
            let mut masked = w_t.clone();
            masked.data_mut().iter_mut().zip(a.data()).for_each(|(x, a)| *x *= a);
            let mut b = sample_centers_psi(&masked, &s, cfg.psi_window);
            // only fully textured cells carry feature consistency
            b.data_mut()
                .iter_mut()
                .zip(w_t.data())
                .for_each(|(x, &t)| if t != 1.0 { *x = 0.0 });
            LayerWeights { m, a, s, w_t, b }
        })
        .collect();
    let (a_ins, b_ins) = instance_weights(m_ins);
    WeightBundle {
        layers,
        m_ins: m_ins.to_vec(),
        a_ins,
        b_ins,
    }
}

/// Write a `[h, w]` map as 8-bit grayscale, values × 255 clipped to `[0, 1]`.
pub fn write_heatmap(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = map.dims2();
    let bytes: Vec<u8> = map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::L8).map_err(|source| {
        NsaError::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// `a_pix.png`, `w_t.png` and `b_pix.png` under `dir/level{l}/`.
pub fn export_heatmaps(bundle: &WeightBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (l, layer) in bundle.layers.iter().enumerate() {
        let sub = dir.join(format!("level{l}"));
        fs::create_dir_all(&sub).map_err(|e| NsaError::io(&sub, e))?;
        for (name, map) in [("a_pix.png", &layer.a), ("w_t.png", &layer.w_t), ("b_pix.png", &layer.b)] {
            let p = sub.join(name);
            write_heatmap(map, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}
