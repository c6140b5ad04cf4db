//! Stage orchestration: source-only pretraining (S1), source-only
//! consistency training against an EMA teacher (S2), and mixed source and
//! pseudo-labeled target training (S3). Checkpoints are a versioned binary
//! container with a SHA-256 over the payload.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::detector::{decode_detections, Detector, DetectorOutputs, OutputValues, ParamSet, Roi, ToyDetector};
use crate::disturbance::{make_hid, make_insd, make_lid, DisturbanceConfig, DisturbedView, InsdView};
use crate::error::{NsaError, Result};
use crate::eval::{evaluate, ApReport};
use crate::geometry::{apply_geo, transform_labels, BBox, FrameId, GeoRecord, ImageSample, LabelKind, LabelSet};
use crate::graph::{extract_nodes, insd_loss, InstanceGraph};
use crate::losses::{align_maps, det_loss, total_objective, training_rois, LossConfig, LossReport, ObjectiveTerms};
use crate::synthetic::SyntheticDataset;
use crate::tensor::Tensor;
use crate::weightmaps::{build_weight_bundle, WeightBundle};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NSACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    S1,
    S2,
    S3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::S1, Stage::S2, Stage::S3];

    pub fn name(self) -> &'static str {
        match self {
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
        }
    }

    /// The stage whose completed checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::S1 => None,
            Stage::S2 => Some(Stage::S1),
            Stage::S3 => Some(Stage::S2),
        }
    }

    fn tag(self) -> u8 {
        self as u8 + 1
    }

    fn from_tag(t: u8) -> Option<Stage> {
        Stage::ALL.get((t as usize).wrapping_sub(1)).copied()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = NsaError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| NsaError::Config(format!("unknown stage `{s}` (expected s1, s2 or s3)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoEntry {
    pub labels: LabelSet,
    /// Global iteration at which the teacher produced these labels.
    pub generated_at: u64,
    pub threshold: f64,
}

/// Teacher detections on the target training images, by image index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelCache {
    pub entries: Vec<PseudoEntry>,
}

impl PseudoLabelCache {
    pub fn num_boxes(&self) -> usize {
        self.entries.iter().map(|e| e.labels.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub teacher: ParamSet,
    pub student: ParamSet,
    /// Momentum buffers of the network the current stage optimizes.
    pub momentum: Vec<Tensor>,
    pub delta: f64,
    pub stage: Stage,
    pub stage_done: bool,
    /// Optimization steps over all stages.
    pub iteration: u64,
    pub stage_iteration: u64,
    /// Every draw of a step is derived from `(seed, stage, stage_iteration)`,
    /// so the seed and the counters are the complete generator state.
    pub seed: u64,
    pub pseudo: Option<PseudoLabelCache>,
}

impl TrainState {
    pub fn new(det: &dyn Detector, seed: u64, delta: f64) -> Self {
        let teacher = det.init_params(seed);
        let momentum = zero_buffers(&teacher);
        Self {
            student: teacher.clone(),
            teacher,
            momentum,
            delta,
            stage: Stage::S1,
            stage_done: false,
            iteration: 0,
            stage_iteration: 0,
            seed,
            pseudo: None,
        }
    }
}

fn zero_buffers(p: &ParamSet) -> Vec<Tensor> {
    p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

/// `θ_t ← δ·θ_t + (1 − δ)·θ_s`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, delta: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(NsaError::Shape("teacher and student parameter layouts differ".into()));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = delta * *a + (1.0 - delta) * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`. A missing gradient counts as zero.
pub fn sgd_step(params: &mut ParamSet, grads: &[Option<Tensor>], buffers: &mut [Tensor], cfg: &SgdConfig) {
    assert_eq!(grads.len(), params.len());
    assert_eq!(buffers.len(), params.len());
    let mut clip = 1.0;
    if cfg.grad_clip > 0.0 {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            clip = cfg.grad_clip / norm;
        }
    }
    for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(buffers.iter_mut()) {
        for (k, (theta, vel)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gk = g.as_ref().map_or(0.0, |g| g.data()[k] * clip);
            *vel = cfg.momentum * *vel + gk + cfg.weight_decay * *theta;
            *theta -= cfg.lr * *vel;
        }
    }
}

/// Receives what a stage produces. All methods default to no-ops.
pub trait Observer {
    fn report(&mut self, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    fn graphs(&mut self, _iteration: u64, _dump: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Labeled source images and unlabeled target images.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<ImageSample>,
    pub target: Vec<ImageSample>,
}

impl TrainData {
    pub fn from_dataset(ds: &SyntheticDataset) -> Self {
        let target = ds
            .target_train
            .samples()
            .into_iter()
            .map(|mut s| {
                s.labels = None;
                s
            })
            .collect();
        Self {
            source: ds.source_train.samples(),
            target,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn step_seed(seed: u64, stage: Stage, stage_iteration: u64) -> u64 {
    splitmix(splitmix(seed ^ ((stage.tag() as u64) << 56)) ^ stage_iteration)
}

/// One image of a consistency step with the labels it is trained against.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub sample: ImageSample,
    pub labels: LabelSet,
}

/// Student outputs on a family of disturbed views, with the teacher
/// registered into the same frames.
struct Branch {
    out: DetectorOutputs<Var>,
    aligned: OutputValues,
    labels: Vec<LabelSet>,
    bundles: Vec<WeightBundle>,
    roi_classes: Vec<usize>,
    roi_areas: Vec<f64>,
}

/// What one optimization step produced.
pub struct StepOutput {
    pub grads: Vec<Option<Tensor>>,
    pub report: LossReport,
    pub graphs: Vec<InstanceGraph>,
}

pub struct Trainer {
    cfg: RunConfig,
    det: ToyDetector,
    dist: DisturbanceConfig,
    loss: LossConfig,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            det: ToyDetector::new(cfg.detector_config()),
            dist: cfg.disturbance_config(),
            loss: cfg.loss_config(),
            cfg: cfg.clone(),
        })
    }

    pub fn detector(&self) -> &ToyDetector {
        &self.det
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn init_state(&self) -> TrainState {
        TrainState::new(&self.det, self.cfg.seed, self.cfg.ema.delta)
    }

    fn iterations(&self, stage: Stage) -> u64 {
        match stage {
            Stage::S1 => self.cfg.stages.s1.iterations,
            Stage::S2 => self.cfg.stages.s2.iterations,
            Stage::S3 => self.cfg.stages.s3.iterations,
        }
    }

    fn sgd(&self, stage: Stage, stage_iteration: u64) -> SgdConfig {
        let o = &self.cfg.optim;
        let s1 = &self.cfg.stages.s1;
        let lr = match stage {
            Stage::S1 if (stage_iteration as f64) >= s1.decay_at * s1.iterations as f64 => 0.1 * s1.lr,
            Stage::S1 => s1.lr,
            Stage::S2 if self.cfg.stages.s2.lr > 0.0 => self.cfg.stages.s2.lr,
            Stage::S3 if self.cfg.stages.s3.lr > 0.0 => self.cfg.stages.s3.lr,
            _ => o.lr,
        };
        SgdConfig {
            lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            grad_clip: o.grad_clip,
        }
    }

    /// Run `stage` to its configured iteration count, resuming a partially
    /// finished run of the same stage.
    pub fn run_stage(&self, state: &mut TrainState, stage: Stage, data: &TrainData, obs: &mut dyn Observer) -> Result<()> {
        let resuming = state.stage == stage && !state.stage_done;
        let starting = match stage.prerequisite() {
            None => false,
            Some(pre) => state.stage == pre && state.stage_done,
        };
        if state.stage == stage && state.stage_done {
            return Ok(());
        }
        if !resuming && !starting {
            let need = stage.prerequisite().map_or("a fresh state".to_string(), |p| format!("a completed {p} checkpoint"));
            return Err(NsaError::State(format!(
                "stage {stage} needs {need}; the state is at {} ({})",
                state.stage,
                if state.stage_done { "complete" } else { "in progress" }
            )));
        }
        if starting {
            state.stage = stage;
            state.stage_done = false;
            state.stage_iteration = 0;
            if stage == Stage::S2 {
                state.student = state.teacher.clone();
            }
        }
        if stage != Stage::S1 && !state.teacher.same_layout(&state.student) {
            return Err(NsaError::State("teacher and student layouts differ".into()));
        }
        if data.source.is_empty() {
            return Err(NsaError::Dataset("no labeled source images".into()));
        }
        if stage == Stage::S3 && data.target.is_empty() {
            return Err(NsaError::Dataset("no target images".into()));
        }

        let total = self.iterations(stage);
        let interval = self.cfg.train.checkpoint_interval;
        while state.stage_iteration < total {
            let seed = step_seed(state.seed, stage, state.stage_iteration);
            let step = match stage {
                Stage::S1 => self.s1_step(&state.teacher, data, seed)?,
                Stage::S2 => {
                    let batch = self.source_batch(data, seed);
                    self.nsa_step(&state.teacher, &state.student, &batch, seed)?
                }
                Stage::S3 => {
                    let refresh = self.cfg.pseudo.refresh_interval.max(1);
                    if state.pseudo.is_none() || state.stage_iteration % refresh == 0 {
                        state.pseudo = Some(self.generate_pseudo_labels(
                            &state.teacher,
                            &data.target,
                            self.cfg.pseudo.threshold,
                            self.cfg.pseudo.nms_iou,
                            state.iteration,
                        ));
                    }
                    let batch = if state.stage_iteration % 2 == 0 {
                        self.source_batch(data, seed)
                    } else {
                        self.target_batch(data, state.pseudo.as_ref().expect("cache filled above"), seed)
                    };
                    self.nsa_step(&state.teacher, &state.student, &batch, seed)?
                }
            };
            let sgd = self.sgd(stage, state.stage_iteration);
            if stage == Stage::S1 {
                sgd_step(&mut state.teacher, &step.grads, &mut state.momentum, &sgd);
            } else {
                sgd_step(&mut state.student, &step.grads, &mut state.momentum, &sgd);
                ema_update(&mut state.teacher, &state.student, state.delta)?;
            }
            state.stage_iteration += 1;
            state.iteration += 1;

            let mut report = step.report;
            report.iteration = state.iteration;
            report.stage = stage.name().to_string();
            obs.report(&report)?;
            if interval > 0 && state.stage_iteration % interval == 0 && state.stage_iteration < total {
                if self.cfg.train.dump_graph && !step.graphs.is_empty() {
                    let dump = serde_json::Value::Array(step.graphs.iter().map(|g| g.to_json()).collect());
                    obs.graphs(state.iteration, &dump)?;
                }
                obs.checkpoint(state)?;
            }
        }
        state.stage_done = true;
        if stage == Stage::S1 {
            // the student starts where pretraining ended, with a fresh optimizer
            state.student = state.teacher.clone();
            state.momentum = zero_buffers(&state.teacher);
        }
        obs.checkpoint(state)?;
        Ok(())
    }

    fn pick(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let b = self.cfg.train.batch_size.min(len);
        sample_indices(rng, len, b).into_vec()
    }

    fn source_batch(&self, data: &TrainData, seed: u64) -> Vec<Labeled> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pick(data.source.len(), &mut rng)
            .into_iter()
            .map(|i| {
                let s = &data.source[i];
                Labeled {
                    labels: s.labels.clone().expect("source images carry ground truth"),
                    sample: s.clone(),
                }
            })
            .collect()
    }

    fn target_batch(&self, data: &TrainData, cache: &PseudoLabelCache, seed: u64) -> Vec<Labeled> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pick(data.target.len(), &mut rng)
            .into_iter()
            .map(|i| Labeled {
                sample: data.target[i].clone(),
                labels: cache.entries[i].labels.clone(),
            })
            .collect()
    }

    /// Source-only supervised step on the teacher: random mirror, detection
    /// loss only.
    pub fn s1_step(&self, params: &ParamSet, data: &TrainData, seed: u64) -> Result<StepOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = self.pick(data.source.len(), &mut rng);
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for i in idx {
            let s = &data.source[i];
            let size = (s.width(), s.height());
            let geo = GeoRecord::centered(s.frame, size, 1.0, rng.gen::<bool>(), size, (0.0, 0.0));
            let view = apply_geo(&geo, s)?;
            let lab = s.labels.as_ref().ok_or_else(|| NsaError::Dataset("source image without labels".into()))?;
            labels.push(transform_labels(&geo, lab)?);
            images.push(view.pixels.to_tensor());
        }
        let images = stack_same(&images)?;
        let size = (images.shape()[3], images.shape()[2]);
        let rois = training_rois(&labels, size);

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let out = self.det.forward(&mut tape, &vars, &images, self.instance_rois(&rois));
        let det = det_loss(&mut tape, &out, &labels, &self.det.config().level_rule, &self.loss);
        let terms = ObjectiveTerms {
            det: Some(det),
            rho: out.rho(),
            ..Default::default()
        };
        let (total, report) = total_objective(&mut tape, &terms, &self.loss);
        let mut g = tape.backward(total);
        Ok(StepOutput {
            grads: vars.iter().map(|&v| g.take(v)).collect(),
            report,
            graphs: Vec::new(),
        })
    }

    fn instance_rois<'r>(&self, rois: &'r [Roi]) -> Option<&'r [Roi]> {
        self.det.has_instance_head().then_some(rois)
    }

    /// One consistency step of the student against the teacher on `batch`.
    /// Returns gradients for the student's parameters.
    pub fn nsa_step(&self, teacher: &ParamSet, student: &ParamSet, batch: &[Labeled], seed: u64) -> Result<StepOutput> {
        let nsa = &self.cfg.nsa;
        let views: Vec<(DisturbedView, DisturbedView, DisturbedView)> = batch
            .par_iter()
            .enumerate()
            .map(|(k, item)| {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ (k as u64).wrapping_mul(0x9e37_79b9)));
                let hid = make_hid(&item.sample, &self.dist, &mut rng)?;
                let lid = make_lid(&item.sample, &self.dist, &mut rng)?;
                let insd = make_insd(&item.sample, &self.dist, &mut rng, Some(&lid), Some(&hid))?;
                Ok((hid, lid, insd))
            })
            .collect::<Result<_>>()?;
        let labels: Vec<LabelSet> = batch.iter().map(|b| b.labels.clone()).collect();
        let originals: Vec<Tensor> = batch.iter().map(|b| b.sample.pixels.to_tensor()).collect();
        let x = stack_same(&originals)?;

        let mut tape = Tape::new();
        let vars = student.bind(&mut tape);
        let mut terms = ObjectiveTerms::default();
        let rule = self.det.config().level_rule.clone();

        if nsa.hid {
            let hid_views: Vec<&DisturbedView> = views.iter().map(|v| &v.0).collect();
            let hid_labels = hid_views
                .iter()
                .zip(&labels)
                .map(|(v, l)| transform_labels(&v.geo, l))
                .collect::<Result<Vec<_>>>()?;
            let imgs = stack_views(&hid_views)?;
            let rois = training_rois(&hid_labels, (imgs.shape()[3], imgs.shape()[2]));
            let out = self.det.forward(&mut tape, &vars, &imgs, self.instance_rois(&rois));
            terms.eca_hid = Some(det_loss(&mut tape, &out, &hid_labels, &rule, &self.loss));
        }
        if nsa.clean_det || !nsa.hid {
            let rois = training_rois(&labels, (x.shape()[3], x.shape()[2]));
            let out = self.det.forward(&mut tape, &vars, &x, self.instance_rois(&rois));
            terms.det = Some(det_loss(&mut tape, &out, &labels, &rule, &self.loss));
        }

        let shares_lid = self.dist.insd_view == InsdView::ShareLid;
        let need_lid = nsa.lid || (nsa.insd && shares_lid);
        let need_insd = nsa.insd && !shares_lid;
        let mut graphs = Vec::new();
        if need_lid || need_insd {
            let teacher_rois: Vec<Roi> = labels
                .iter()
                .enumerate()
                .flat_map(|(b, l)| l.boxes.iter().map(move |&bbox| Roi { batch: b, bbox }))
                .collect();
            let t_out = self.det.eval(teacher, &x, self.instance_rois(&teacher_rois));
            let lid = if need_lid {
                let lid_views: Vec<&DisturbedView> = views.iter().map(|v| &v.1).collect();
                Some(self.branch(&mut tape, &vars, &lid_views, &labels, &teacher_rois, &t_out)?)
            } else {
                None
            };
            if nsa.lid {
                let br = lid.as_ref().expect("light branch built");
                terms.eca_lid = Some(crate::losses::eca_lid(&mut tape, &br.aligned, &br.out, &br.bundles));
                terms.ica_lid = Some(crate::losses::ica_lid(&mut tape, &br.aligned, &br.out, &br.bundles));
            }
            if nsa.insd {
                let own;
                let br = if shares_lid {
                    lid.as_ref().expect("light branch built")
                } else {
                    let insd_views: Vec<&DisturbedView> = views.iter().map(|v| &v.2).collect();
                    own = self.branch(&mut tape, &vars, &insd_views, &labels, &teacher_rois, &t_out)?;
                    &own
                };
                let student_vals = br.out.values(&tape);
                let layers = extract_nodes(
                    &br.aligned,
                    &student_vals,
                    &br.labels,
                    &br.bundles,
                    &br.roi_classes,
                    &br.roi_areas,
                    &self.cfg.graph,
                );
                let mut sources: Vec<Var> = br.out.levels.iter().map(|l| l.features).collect();
                if layers.len() > sources.len() {
                    sources.push(br.out.instance.as_ref().expect("instance layer present").features);
                }
                graphs = layers.into_iter().map(|n| InstanceGraph::build(n, self.cfg.graph.n_b)).collect();
                terms.ica_insd = Some(insd_loss(&mut tape, &graphs, &sources, self.cfg.graph.window));
            }
        }
        terms.rho = self.det.has_instance_head();

        let (total, report) = total_objective(&mut tape, &terms, &self.loss);
        let mut g = tape.backward(total);
        Ok(StepOutput {
            grads: vars.iter().map(|&v| g.take(v)).collect(),
            report,
            graphs,
        })
    }

    /// Student forward on `views`, pooling at the labels moved into each
    /// view; the teacher's instance rows are matched to the student's.
    fn branch(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        views: &[&DisturbedView],
        labels: &[LabelSet],
        teacher_rois: &[Roi],
        teacher: &OutputValues,
    ) -> Result<Branch> {
        // teacher row of each caller roi
        let mut teacher_row = vec![None; teacher_rois.len()];
        if let Some(ti) = &teacher.instance {
            for (row, &k) in ti.kept.iter().enumerate() {
                teacher_row[k] = Some(row);
            }
        }
        let mut rois = Vec::new();
        let mut rows = Vec::new();
        let mut view_labels = Vec::with_capacity(views.len());
        let mut caller = 0;
        for (b, (v, lab)) in views.iter().zip(labels).enumerate() {
            let mut kept = Vec::new();
            for &bx in &lab.boxes {
                let one = LabelSet::new(lab.frame, lab.kind, vec![bx]);
                let moved = transform_labels(&v.geo, &one)?;
                if let Some(&m) = moved.boxes.first() {
                    kept.push(m);
                    if let Some(row) = teacher_row[caller] {
                        rois.push(Roi { batch: b, bbox: m });
                        rows.push(row);
                    }
                }
                caller += 1;
            }
            view_labels.push(LabelSet::new(v.image.frame, lab.kind, kept));
        }
        let imgs = stack_views(views)?;
        let with_rois = self.det.has_instance_head() && teacher.instance.is_some();
        let out = self.det.forward(tape, vars, &imgs, with_rois.then_some(&rois[..]));

        let mut sub = OutputValues {
            levels: teacher.levels.clone(),
            instance: None,
            strides: teacher.strides.clone(),
        };
        let mut roi_classes = Vec::new();
        let mut roi_areas = Vec::new();
        if let (Some(ti), Some(si)) = (&teacher.instance, &out.instance) {
            let pick: Vec<usize> = si.kept.iter().map(|&k| rows[k]).collect();
            sub.instance = Some(crate::detector::InstanceOutputs {
                features: select_rows(&ti.features, &pick),
                class: select_rows(&ti.class, &pick),
                boxes: select_rows(&ti.boxes, &pick),
                rois: si.rois.clone(),
                kept: si.kept.clone(),
            });
            roi_classes = si.rois.iter().map(|r| r.bbox.class_id + 1).collect();
            roi_areas = si.rois.iter().map(|r| r.bbox.area()).collect();
        }
        let targets: Vec<(usize, usize)> = out
            .levels
            .iter()
            .map(|l| {
                let s = tape.value(l.class).shape();
                (s[2], s[3])
            })
            .collect();
        let geos: Vec<GeoRecord> = views.iter().map(|v| v.geo).collect();
        let aligned = align_maps(&sub, &geos, &targets);

        let rule = &self.det.config().level_rule;
        let bundles = view_labels
            .iter()
            .enumerate()
            .map(|(b, lab)| {
                let feats: Vec<Tensor> = aligned.levels.iter().map(|l| l.features.image(b)).collect();
                let m_ins: Vec<usize> = out
                    .instance
                    .as_ref()
                    .map(|si| si.rois.iter().filter(|r| r.batch == b).map(|r| r.bbox.class_id + 1).collect())
                    .unwrap_or_default();
                build_weight_bundle(&feats, lab, &aligned.strides, rule, &self.cfg.weights, &m_ins)
            })
            .collect();
        Ok(Branch {
            out,
            aligned,
            labels: view_labels,
            bundles,
            roi_classes,
            roi_areas,
        })
    }

    /// Teacher pixel-head detections per target image, thresholded and
    /// suppressed, stamped with `iteration`.
    pub fn generate_pseudo_labels(
        &self,
        teacher: &ParamSet,
        images: &[ImageSample],
        score_thresh: f64,
        nms_iou: f64,
        iteration: u64,
    ) -> PseudoLabelCache {
        let entries = self
            .predict(teacher, images, score_thresh, nms_iou)
            .into_iter()
            .map(|mut labels| {
                labels.kind = LabelKind::Pseudo;
                PseudoEntry {
                    labels,
                    generated_at: iteration,
                    threshold: score_thresh,
                }
            })
            .collect();
        PseudoLabelCache { entries }
    }

    /// Decoded pixel-head detections, one set per image.
    pub fn predict(&self, params: &ParamSet, images: &[ImageSample], score_thresh: f64, nms_iou: f64) -> Vec<LabelSet> {
        const CHUNK: usize = 16;
        let max_det = self.cfg.eval.max_detections;
        images
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let tensors: Vec<Tensor> = chunk.iter().map(|s| s.pixels.to_tensor()).collect();
                let out = self.det.eval(params, &Tensor::stack(&tensors), None);
                chunk
                    .iter()
                    .enumerate()
                    .map(|(n, s)| decode_detections(&out, n, s.frame, score_thresh, nms_iou, max_det))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Mean AP of `params` on labeled `images` with the evaluation settings.
    pub fn evaluate(&self, params: &ParamSet, images: &[ImageSample]) -> Result<ApReport> {
        let gts = images
            .iter()
            .map(|s| {
                s.labels
                    .as_ref()
                    .map(|l| l.boxes.clone())
                    .ok_or_else(|| NsaError::Dataset("evaluation split has no ground truth".into()))
            })
            .collect::<Result<Vec<Vec<BBox>>>>()?;
        let e = &self.cfg.eval;
        let preds: Vec<Vec<BBox>> = self
            .predict(params, images, e.score_thresh, e.nms_iou)
            .into_iter()
            .map(|l| l.boxes)
            .collect();
        Ok(evaluate(&preds, &gts, self.det.num_classes(), e.iou))
    }
}

fn stack_same(items: &[Tensor]) -> Result<Tensor> {
    if items.windows(2).any(|w| w[0].shape() != w[1].shape()) {
        return Err(NsaError::Shape("batch images differ in size".into()));
    }
    Ok(Tensor::stack(items))
}

fn stack_views(views: &[&DisturbedView]) -> Result<Tensor> {
    let t: Vec<Tensor> = views.iter().map(|v| v.image.pixels.to_tensor()).collect();
    stack_same(&t)
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let (_, d) = t.dims2();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
    }
    Tensor::from_vec(&[rows.len(), d], data)
}

// ---- checkpoint container ----
//
// magic[8] | version u32 | stage u8 | done u8 | iteration u64 |
// stage_iteration u64 | payload_len u64 | sha256(payload)[32] | payload
//
// payload: seed u64 | delta f64 | teacher | student | momentum | pseudo

fn write_params(w: &mut Vec<u8>, names: &[String], tensors: &[Tensor]) {
    w.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for (name, t) in names.iter().zip(tensors) {
        w.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        w.extend_from_slice(name.as_bytes());
        w.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &x in t.data() {
            w.write_f64::<LittleEndian>(x).unwrap();
        }
    }
}

fn write_labels(w: &mut Vec<u8>, l: &LabelSet) {
    w.write_u64::<LittleEndian>(l.frame.0).unwrap();
    w.write_u32::<LittleEndian>(l.boxes.len() as u32).unwrap();
    for b in &l.boxes {
        for v in [b.x_min, b.y_min, b.x_max, b.y_max, b.score] {
            w.write_f64::<LittleEndian>(v).unwrap();
        }
        w.write_u32::<LittleEndian>(b.class_id as u32).unwrap();
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut p = Vec::new();
    p.write_u64::<LittleEndian>(state.seed).unwrap();
    p.write_f64::<LittleEndian>(state.delta).unwrap();
    write_params(&mut p, state.teacher.names(), state.teacher.tensors());
    write_params(&mut p, state.student.names(), state.student.tensors());
    write_params(&mut p, state.student.names(), &state.momentum);
    match &state.pseudo {
        None => p.push(0),
        Some(cache) => {
            p.push(1);
            p.write_u32::<LittleEndian>(cache.entries.len() as u32).unwrap();
            for e in &cache.entries {
                p.write_u64::<LittleEndian>(e.generated_at).unwrap();
                p.write_f64::<LittleEndian>(e.threshold).unwrap();
                write_labels(&mut p, &e.labels);
            }
        }
    }
    let mut out = Vec::with_capacity(p.len() + 80);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    out.push(state.stage.tag());
    out.push(state.stage_done as u8);
    out.write_u64::<LittleEndian>(state.iteration).unwrap();
    out.write_u64::<LittleEndian>(state.stage_iteration).unwrap();
    out.write_u64::<LittleEndian>(p.len() as u64).unwrap();
    out.extend_from_slice(&Sha256::digest(&p));
    out.extend_from_slice(&p);
    out
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn u8(&mut self) -> std::io::Result<u8> {
        self.cur.read_u8()
    }

    fn u32(&mut self) -> std::io::Result<u32> {
        self.cur.read_u32::<LittleEndian>()
    }

    fn u64(&mut self) -> std::io::Result<u64> {
        self.cur.read_u64::<LittleEndian>()
    }

    fn f64(&mut self) -> std::io::Result<f64> {
        self.cur.read_f64::<LittleEndian>()
    }

    fn bytes(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut v = vec![0; n];
        self.cur.read_exact(&mut v)?;
        Ok(v)
    }

    fn params(&mut self) -> std::io::Result<(Vec<String>, Vec<Tensor>)> {
        let n = self.u32()? as usize;
        let mut names = Vec::with_capacity(n);
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.bytes(len)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| self.f64()).collect::<std::io::Result<Vec<_>>>()?;
            names.push(name);
            tensors.push(Tensor::from_vec(&shape, data));
        }
        Ok((names, tensors))
    }

    fn labels(&mut self) -> std::io::Result<LabelSet> {
        let frame = FrameId(self.u64()?);
        let n = self.u32()? as usize;
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            let v = [self.f64()?, self.f64()?, self.f64()?, self.f64()?, self.f64()?];
            let class_id = self.u32()? as usize;
            boxes.push(BBox::new(v[0], v[1], v[2], v[3], class_id).with_score(v[4]));
        }
        Ok(LabelSet::new(frame, LabelKind::Pseudo, boxes))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let bad = |reason: String| NsaError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    const HEADER: usize = 8 + 4 + 1 + 1 + 8 + 8 + 8 + 32;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    if bytes.len() < HEADER {
        return Err(bad("truncated header".into()));
    }
    let mut r = Reader {
        cur: Cursor::new(&bytes[12..HEADER]),
    };
    let io = |e: std::io::Error| bad(format!("malformed header: {e}"));
    let stage_tag = r.u8().map_err(io)?;
    let done = r.u8().map_err(io)?;
    let iteration = r.u64().map_err(io)?;
    let stage_iteration = r.u64().map_err(io)?;
    let payload_len = r.u64().map_err(io)? as usize;
    let checksum = &bytes[HEADER - 32..HEADER];
    let payload = &bytes[HEADER..];
    if payload.len() != payload_len || Sha256::digest(payload).as_slice() != checksum {
        return Err(bad("checksum mismatch (truncated or corrupted)".into()));
    }
    let stage = Stage::from_tag(stage_tag).ok_or_else(|| bad(format!("unknown stage tag {stage_tag}")))?;

    let mut r = Reader {
        cur: Cursor::new(payload),
    };
    let io = |e: std::io::Error| bad(format!("malformed payload: {e}"));
    let seed = r.u64().map_err(io)?;
    let delta = r.f64().map_err(io)?;
    let to_set = |(names, tensors): (Vec<String>, Vec<Tensor>)| {
        let mut p = ParamSet::new();
        for (n, t) in names.into_iter().zip(tensors) {
            p.push(n, t);
        }
        p
    };
    let teacher = to_set(r.params().map_err(io)?);
    let student = to_set(r.params().map_err(io)?);
    let (_, momentum) = r.params().map_err(io)?;
    let pseudo = match r.u8().map_err(io)? {
        0 => None,
        _ => {
            let n = r.u32().map_err(io)? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let generated_at = r.u64().map_err(io)?;
                let threshold = r.f64().map_err(io)?;
                let labels = r.labels().map_err(io)?;
                entries.push(PseudoEntry {
                    labels,
                    generated_at,
                    threshold,
                });
            }
            Some(PseudoLabelCache { entries })
        }
    };
    if !teacher.same_layout(&student) || momentum.len() != student.len() {
        return Err(bad("teacher, student and optimizer layouts differ".into()));
    }
    Ok(TrainState {
        teacher,
        student,
        momentum,
        delta,
        stage,
        stage_done: done != 0,
        iteration,
        stage_iteration,
        seed,
        pseudo,
    })
}

/// Write atomically through a sibling temporary file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| NsaError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| NsaError::io(&tmp, e))?;
    f.write_all(&encode_checkpoint(state)).map_err(|e| NsaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| NsaError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NsaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| NsaError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
