//! Scalar reference implementations and fixtures shared by the integration
//! tests. The oracles are written from the definitions, not from the
//! library code: explicit padded copies instead of index reflection, keyed
//! maps instead of sorted scans, plain cosines instead of pre-normalized
//! vectors.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nsa::autodiff::{Tape, Var};
use nsa::detector::{DetectorOutputs, OutputValues};
use nsa::graph::{GraphNode, NodeSource};
use nsa::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Mirror padding that does not repeat the border sample, built by copying.
pub fn pad_reflect(plane: &[f64], h: usize, w: usize, p: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mirror = |k: i64, n: usize| -> usize {
        let n = n as i64;
        let mut k = k;
        // repeat single reflections until inside; the window never spans more than a period
        loop {
            if k < 0 {
                k = -k;
            } else if k >= n {
                k = 2 * (n - 1) - k;
            } else {
                return k as usize;
            }
            if n == 1 {
                return 0;
            }
        }
    };
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let sy = mirror(y as i64 - p as i64, h);
            let sx = mirror(x as i64 - p as i64, w);
            out[y * pw + x] = plane[sy * w + sx];
        }
    }
    (out, ph, pw)
}

pub fn smoothness_oracle(f: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let p = r / 2;
    let mut raw = vec![0.0; h * w];
    for ch in 0..c {
        let (pad, _, pw) = pad_reflect(&f[ch * h * w..(ch + 1) * h * w], h, w, p);
        for i in 0..h {
            for j in 0..w {
                let mut window = Vec::with_capacity(r * r);
                for a in 0..r {
                    for b in 0..r {
                        window.push(pad[(i + a) * pw + (j + b)]);
                    }
                }
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                raw[i * w + j] += (f[ch * h * w + i * w + j] - mean).abs();
            }
        }
    }
    let max = raw.iter().cloned().fold(f64::MIN, f64::max);
    let min = raw.iter().cloned().fold(f64::MAX, f64::min);
    if max == min {
        return vec![0.0; h * w];
    }
    raw.iter().map(|v| (v - min) / (max - min)).collect()
}

pub fn texture_oracle(s: &[f64], eta1: f64, eta2: f64) -> Vec<f64> {
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    s.iter()
        .map(|&v| match v {
            v if v > eta2 * mean => 1.0,
            v if v > eta1 * mean && v <= eta2 * mean => 0.1,
            _ => 0.0,
        })
        .collect()
}

pub fn psi_oracle(wm: &[f64], s: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let (pad, _, pw) = pad_reflect(s, h, w, p);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut m = f64::MIN;
            for a in 0..k {
                for b in 0..k {
                    m = m.max(pad[(i + a) * pw + (j + b)]);
                }
            }
            if s[i * w + j] == m {
                out[i * w + j] = wm[i * w + j];
            }
        }
    }
    out
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa * bb).sqrt()
}

pub fn edges_oracle(nodes: &[GraphNode]) -> Vec<Vec<f64>> {
    nodes
        .iter()
        .map(|a| nodes.iter().map(|b| 1.0 - cos(&a.feature_student, &b.feature_teacher)).collect())
        .collect()
}

pub fn centers_oracle(nodes: &[GraphNode]) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, f64)> = BTreeMap::new();
    for n in nodes.iter().filter(|n| n.class_id != 0) {
        let e = sums
            .entry(n.class_id)
            .or_insert_with(|| (vec![0.0; n.feature_teacher.len()], 0.0));
        for (acc, v) in e.0.iter_mut().zip(&n.feature_teacher) {
            *acc += v;
        }
        e.1 += 1.0;
    }
    sums.into_iter()
        .map(|(k, (s, cnt))| (k, s.into_iter().map(|v| v / cnt).collect()))
        .collect()
}

/// `−(1/ΣW) Σ_i W_i log softmax_i[own]` over cosines to the centers and the
/// chosen background teacher features.
pub fn insd_oracle(nodes: &[GraphNode], background: &[usize]) -> f64 {
    let centers = centers_oracle(nodes);
    let mut num = 0.0;
    let mut den = 0.0;
    for n in nodes.iter().filter(|n| n.class_id != 0) {
        let mut logits: Vec<f64> = centers.values().map(|c| cos(&n.feature_student, c)).collect();
        logits.extend(background.iter().map(|&j| cos(&n.feature_student, &nodes[j].feature_teacher)));
        let own = cos(&n.feature_student, &centers[&n.class_id]);
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        num += -(own.exp() / z).ln();
        den += 1.0;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Random graph nodes with classes in `0..=classes` (0 = background); every
/// run has at least one foreground node.
pub fn rand_nodes(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> Vec<GraphNode> {
    (0..n)
        .map(|row| {
            let class_id = if row == 0 { 1 } else { rng.gen_range(0..=classes) };
            GraphNode {
                feature_student: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                feature_teacher: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                class_id,
                source: NodeSource::InstanceRoi { row },
                layer: 0,
                area_px: 64.0,
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps near-zero gradients,
/// where central differences are dominated by rounding, from dividing by
/// noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Leaves of `out` in `DetectorOutputs::map` order.
pub fn leaves_mut(out: &mut OutputValues) -> Vec<&mut Tensor> {
    let mut v = Vec::new();
    for l in &mut out.levels {
        v.push(&mut l.features);
        v.push(&mut l.class);
        v.push(&mut l.boxes);
        v.push(&mut l.centerness);
    }
    if let Some(i) = &mut out.instance {
        v.push(&mut i.features);
        v.push(&mut i.class);
        v.push(&mut i.boxes);
    }
    v
}

/// Value and gradients of `f` with every tensor of `out` as a leaf.
pub fn eval_with_grads(
    out: &OutputValues,
    f: &dyn Fn(&mut Tape, &DetectorOutputs<Var>) -> Var,
) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let outs = out.map(|t| {
        let v = tape.param(t.clone());
        vars.push(v);
        v
    });
    let root = f(&mut tape, &outs);
    let value = tape.value(root).item();
    let g = tape.backward(root);
    let grads = vars
        .iter()
        .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    (value, grads)
}

/// Largest relative error between autodiff and central differences at
/// step `eps`, over every scalar of every leaf.
pub fn grad_check(out: &OutputValues, eps: f64, f: &dyn Fn(&mut Tape, &DetectorOutputs<Var>) -> Var) -> (f64, usize) {
    let (_, grads) = eval_with_grads(out, f);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = out.clone();
    let n_leaves = leaves_mut(&mut probe).len();
    for m in 0..n_leaves {
        let len = grads[m].len();
        for k in 0..len {
            let orig = leaves_mut(&mut probe)[m].data()[k];
            leaves_mut(&mut probe)[m].data_mut()[k] = orig + eps;
            let up = eval_with_grads(&probe, f).0;
            leaves_mut(&mut probe)[m].data_mut()[k] = orig - eps;
            let down = eval_with_grads(&probe, f).0;
            leaves_mut(&mut probe)[m].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(grads[m].data()[k], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
