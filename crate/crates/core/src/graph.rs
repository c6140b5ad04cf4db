//! Instance graph over pooled object and background features, and the
//! contrastive loss that pulls each object toward its class center.
//!
//! Nodes carry a student feature (differentiable, gathered from the
//! student's tape) and a teacher feature (constant). Edges compare student
//! rows with teacher columns; class centers and background negatives are
//! teacher-side and therefore detached.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{GatherEntry, Tape, Var};
use crate::detector::{LevelRule, OutputValues};
use crate::geometry::LabelSet;
use crate::tensor::Tensor;
use crate::weightmaps::{assign_cells, reflect101, WeightBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Background negatives kept per graph.
    pub n_b: usize,
    /// Side of the averaged pixel window.
    pub window: usize,
    /// Per-level box-area gates as multiples of the stride: an object at
    /// level `l` qualifies when `(lo·s)² <= area <= (hi·s)²`.
    pub area_lo: f64,
    pub area_hi: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            n_b: 16,
            window: 3,
            area_lo: 2.0,
            area_hi: 16.0,
        }
    }
}

impl GraphConfig {
    pub fn area_gate(&self, stride: usize) -> (f64, f64) {
        let s = stride as f64;
        ((self.area_lo * s).powi(2), (self.area_hi * s).powi(2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeSource {
    /// Mean of a window centered on cell `(i, j)` of image `batch`.
    PixelWindow { batch: usize, i: usize, j: usize },
    /// Row of the instance feature matrix.
    InstanceRoi { row: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub feature_student: Vec<f64>,
    pub feature_teacher: Vec<f64>,
    /// Class id plus one; 0 marks a background candidate.
    pub class_id: usize,
    pub source: NodeSource,
    pub layer: usize,
    pub area_px: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn window_mean(map: &Tensor, b: usize, i: usize, j: usize, k: usize) -> Vec<f64> {
    let (_, c, h, w) = map.dims4();
    let half = (k / 2) as isize;
    let inv = 1.0 / (k * k) as f64;
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for di in -half..=half {
                let y = reflect101(i as isize + di, h);
                for dj in -half..=half {
                    acc += map.at4(b, ch, y, reflect101(j as isize + dj, w));
                }
            }
            acc * inv
        })
        .collect()
}

/// Nodes of every graph layer: one per pixel level, then the instance layer
/// when both networks pooled instances.
///
/// A pixel window is centered on every cell with `W_t = 1`. It carries the
/// class of the smallest label box covering its center when that box's area
/// passes the level's gate; windows on boxes outside the gate are skipped;
/// uncovered windows become background candidates. `roi_classes[r]` is the
/// shifted class of instance row `r`, with `roi_areas[r]` its area.
pub fn extract_nodes(
    teacher: &OutputValues,
    student: &OutputValues,
    labels: &[LabelSet],
    bundles: &[WeightBundle],
    roi_classes: &[usize],
    roi_areas: &[f64],
    cfg: &GraphConfig,
) -> Vec<Vec<GraphNode>> {
    let any_level = LevelRule { bounds: vec![] };
    let mut layers = Vec::new();
    for (l, ((tl, sl), &stride)) in teacher.levels.iter().zip(&student.levels).zip(&student.strides).enumerate() {
        let (_, _, h, w) = sl.features.dims4();
        let (lo, hi) = cfg.area_gate(stride);
        let mut nodes = Vec::new();
        for (b, lab) in labels.iter().enumerate() {
            let owner = assign_cells(lab, (h, w), stride, 0, &any_level);
            let wt = &bundles[b].layers[l].w_t;
            for i in 0..h {
                for j in 0..w {
                    if wt.data()[i * w + j] != 1.0 {
                        continue;
                    }
                    let (class_id, area_px) = match owner[i * w + j] {
                        Some(k) => {
                            let bx = lab.boxes[k];
                            if bx.area() < lo || bx.area() > hi {
                                continue;
                            }
                            (bx.class_id + 1, bx.area())
                        }
                        None => (0, (cfg.window * stride).pow(2) as f64),
                    };
                    let fs = window_mean(&sl.features, b, i, j, cfg.window);
                    let ft = window_mean(&tl.features, b, i, j, cfg.window);
                    nodes.push(GraphNode {
                        feature_student: fs,
                        feature_teacher: ft,
                        class_id,
                        source: NodeSource::PixelWindow { batch: b, i, j },
                        layer: l,
                        area_px,
                    });
                }
            }
        }
        layers.push(nodes);
    }
    if let (Some(ti), Some(si)) = (&teacher.instance, &student.instance) {
        let (r, d) = si.features.dims2();
        assert_eq!(roi_classes.len(), r, "one class per instance row");
        let l = layers.len();
        let nodes = (0..r)
            .map(|row| GraphNode {
                feature_student: si.features.data()[row * d..(row + 1) * d].to_vec(),
                feature_teacher: ti.features.data()[row * d..(row + 1) * d].to_vec(),
                class_id: roi_classes[row],
                source: NodeSource::InstanceRoi { row },
                layer: l,
                area_px: roi_areas[row],
            })
            .collect();
        layers.push(nodes);
    }
    for nodes in &mut layers {
        nodes.retain(|n| norm(&n.feature_student) > 1e-12 && norm(&n.feature_teacher) > 1e-12);
    }
    layers
}

/// `E[i][j] = 1 − cos(student_i, teacher_j)`, row-major `N × N`.
pub fn build_edges(nodes: &[GraphNode]) -> Vec<f64> {
    let n = nodes.len();
    let unit = |v: &[f64]| {
        let r = norm(v);
        v.iter().map(|x| x / r).collect::<Vec<_>>()
    };
    let s: Vec<Vec<f64>> = nodes.iter().map(|n| unit(&n.feature_student)).collect();
    let t: Vec<Vec<f64>> = nodes.iter().map(|n| unit(&n.feature_teacher)).collect();
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = s[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
            e[i * n + j] = 1.0 - dot;
        }
    }
    e
}

/// Hardest `n_b` background candidates: ascending by their smallest edge to
/// any foreground node, ties by index.
pub fn select_background(nodes: &[GraphNode], edges: &[f64], n_b: usize) -> Vec<usize> {
    let n = nodes.len();
    let fg: Vec<usize> = (0..n).filter(|&i| nodes[i].class_id > 0).collect();
    let mut cands: Vec<(f64, usize)> = (0..n)
        .filter(|&i| nodes[i].class_id == 0)
        .map(|i| {
            let score = fg.iter().map(|&j| edges[i * n + j]).fold(f64::INFINITY, f64::min);
            (score, i)
        })
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.into_iter().take(n_b).map(|(_, i)| i).collect()
}

/// Mean teacher feature of each class present, ordered by class id.
pub fn class_centers(nodes: &[GraphNode]) -> Vec<(usize, Vec<f64>)> {
    let mut classes: Vec<usize> = nodes.iter().filter(|n| n.class_id > 0).map(|n| n.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|k| {
            let members: Vec<&GraphNode> = nodes.iter().filter(|n| n.class_id == k).collect();
            let d = members[0].feature_teacher.len();
            let mut c = vec![0.0; d];
            for m in &members {
                c.iter_mut().zip(&m.feature_teacher).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / members.len() as f64;
            c.iter_mut().for_each(|a| *a *= inv);
            (k, c)
        })
        .collect()
}

/// Cosine similarity of every node's student feature to each center
/// (`N × K`) and to each selected background node's teacher feature
/// (`N × N_b`).
pub fn distances(nodes: &[GraphNode], centers: &[(usize, Vec<f64>)], background: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut ct = Vec::with_capacity(nodes.len() * centers.len());
    let mut bg = Vec::with_capacity(nodes.len() * background.len());
    for n in nodes {
        for (_, c) in centers {
            ct.push(cosine(&n.feature_student, c));
        }
        for &j in background {
            bg.push(cosine(&n.feature_student, &nodes[j].feature_teacher));
        }
    }
    (ct, bg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<f64>,
    pub centers: Vec<(usize, Vec<f64>)>,
    pub background: Vec<usize>,
    pub d_ct: Vec<f64>,
    pub d_bg: Vec<f64>,
    /// 1 for foreground nodes.
    pub weights: Vec<f64>,
}

impl InstanceGraph {
    pub fn build(nodes: Vec<GraphNode>, n_b: usize) -> Self {
        let edges = build_edges(&nodes);
        let background = select_background(&nodes, &edges, n_b);
        let centers = class_centers(&nodes);
        let (d_ct, d_bg) = distances(&nodes, &centers, &background);
        let weights = nodes.iter().map(|n| if n.class_id > 0 { 1.0 } else { 0.0 }).collect();
        Self {
            nodes,
            edges,
            centers,
            background,
            d_ct,
            d_bg,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn center_slot(&self, class_id: usize) -> usize {
        self.centers.iter().position(|(k, _)| *k == class_id).expect("own class has a center")
    }

    /// `−Σ_i W_i log p_i / Σ_i W_i`, evaluated from the stored distances.
    pub fn loss_value(&self) -> f64 {
        let total_w: f64 = self.weights.iter().sum();
        if total_w == 0.0 {
            return 0.0;
        }
        let (k, nb) = (self.centers.len(), self.background.len());
        let mut acc = 0.0;
        for (i, n) in self.nodes.iter().enumerate() {
            if self.weights[i] == 0.0 {
                continue;
            }
            let own = self.d_ct[i * k + self.center_slot(n.class_id)];
            let denom: f64 = self.d_ct[i * k..(i + 1) * k].iter().map(|d| d.exp()).sum::<f64>()
                + self.d_bg[i * nb..(i + 1) * nb].iter().map(|d| d.exp()).sum::<f64>();
            acc -= self.weights[i] * (own.exp() / denom).ln();
        }
        acc / total_w
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "nodes": self.nodes.iter().map(|n| json!({
                "class_id": n.class_id,
                "layer": n.layer,
                "area_px": n.area_px,
                "source": n.source,
            })).collect::<Vec<_>>(),
            "edges": self.edges,
            "centers": self.centers.iter().map(|(k, _)| k).collect::<Vec<_>>(),
            "background": self.background,
            "d_ct": self.d_ct,
            "d_bg": self.d_bg,
        })
    }
}

/// Gather the student rows of `graph` out of the tape variable `source`
/// (`[n, c, h, w]` for pixel layers, `[r, d]` for the instance layer).
fn gather_student(tape: &mut Tape, graph: &InstanceGraph, source: Var, window: usize) -> Var {
    let shape = tape.value(source).shape().to_vec();
    let mut entries = Vec::new();
    let d;
    if shape.len() == 4 {
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        d = c;
        let half = (window / 2) as isize;
        let inv = 1.0 / (window * window) as f64;
        for (row, n) in graph.nodes.iter().enumerate() {
            let NodeSource::PixelWindow { batch, i, j } = n.source else {
                panic!("instance node in a pixel layer")
            };
            for ch in 0..c {
                for di in -half..=half {
                    let y = reflect101(i as isize + di, h);
                    for dj in -half..=half {
                        let x = reflect101(j as isize + dj, w);
                        entries.push(GatherEntry {
                            out_index: (row * c + ch) as u32,
                            in_index: (((batch * c + ch) * h + y) * w + x) as u32,
                            weight: inv,
                        });
                    }
                }
            }
        }
    } else {
        d = shape[1];
        for (row, n) in graph.nodes.iter().enumerate() {
            let NodeSource::InstanceRoi { row: r } = n.source else {
                panic!("pixel node in the instance layer")
            };
            for ch in 0..d {
                entries.push(GatherEntry {
                    out_index: (row * d + ch) as u32,
                    in_index: (r * d + ch) as u32,
                    weight: 1.0,
                });
            }
        }
    }
    tape.gather(source, entries, &[graph.len(), d])
}

/// Contrastive loss summed over graph layers. `sources[m]` is the student
/// variable the nodes of `graphs[m]` were pooled from.
pub fn insd_loss(tape: &mut Tape, graphs: &[InstanceGraph], sources: &[Var], window: usize) -> Var {
    assert_eq!(graphs.len(), sources.len());
    let mut terms = Vec::new();
    for (g, &src) in graphs.iter().zip(sources) {
        let total_w: f64 = g.weights.iter().sum();
        if total_w == 0.0 {
            continue;
        }
        let d = g.nodes[0].feature_teacher.len();
        let unit = |v: &[f64]| {
            let r = norm(v);
            v.iter().map(|x| x / r).collect::<Vec<_>>()
        };
        let mut anchors = Vec::with_capacity((g.centers.len() + g.background.len()) * d);
        for (_, c) in &g.centers {
            anchors.extend(unit(c));
        }
        for &j in &g.background {
            anchors.extend(unit(&g.nodes[j].feature_teacher));
        }
        let anchors = Tensor::from_vec(&[g.centers.len() + g.background.len(), d], anchors);
        let positive = g
            .nodes
            .iter()
            .map(|n| if n.class_id > 0 { g.center_slot(n.class_id) } else { 0 })
            .collect();
        let feats = gather_student(tape, g, src, window);
        let l = tape.contrastive(feats, anchors, positive, g.weights.clone());
        terms.push((l, 1.0 / total_w));
    }
    if terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        tape.weighted_sum(&terms)
    }
}
