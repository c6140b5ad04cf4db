//! Run configuration: every tunable in one tree, read from a flat
//! `dotted.key = value` file.
//!
//! Parsing is strict. Each key must name an existing leaf of the default
//! tree and its value must parse as that leaf's type; anything else is an
//! error naming the key.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::detector::ToyDetectorConfig;
use crate::disturbance::{DisturbanceConfig, InsdView, PhotometricConfig};
use crate::error::{NsaError, Result};
use crate::graph::GraphConfig;
use crate::losses::LossConfig;
use crate::synthetic::{SyntheticSceneSpec, TargetStyle};
use crate::weightmaps::WeightConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub root: String,
    pub canvas_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub fog_alpha: f64,
    pub fog_level: f64,
    pub noise_sigma: f64,
    pub hue_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSection {
    pub num_classes: usize,
    pub stem_width: usize,
    pub width: usize,
    pub instance_head: bool,
    pub instance_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSection {
    pub s_hid: f64,
    pub v_hid_enabled: bool,
    pub s_lid: f64,
    pub d_lid: f64,
    pub insd_view: InsdView,
    pub lid_jitter_scale: f64,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub saturation_jitter: f64,
    pub blur_sigma_max: f64,
    pub noise_sigma_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    pub gamma_hid: f64,
    pub gamma_lid: f64,
    pub gamma_insd: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub ignore_cross_level: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaSection {
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSection {
    pub threshold: f64,
    pub nms_iou: f64,
    pub refresh_interval: u64,
}

/// Which disturbance branches contribute to the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsaSection {
    pub hid: bool,
    pub lid: bool,
    pub insd: bool,
    /// Keep the supervised detection term on the undisturbed image next to
    /// the heavy-view term in S2/S3.
    pub clean_det: bool,
}

/// Source-only pretraining starts from random weights and runs at its own
/// learning rate; the adaptation stages use their own `lr` or `optim.lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub iterations: u64,
    pub lr: f64,
    /// Fraction of the stage after which the rate drops tenfold.
    pub decay_at: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSection {
    pub iterations: u64,
    /// Learning rate of the stage; 0 falls back to `optim.lr`.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagesSection {
    pub s1: PretrainSection,
    pub s2: StageSection,
    pub s3: StageSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub batch_size: usize,
    pub checkpoint_interval: u64,
    pub checkpoint_dir: String,
    pub metrics_log: String,
    /// Write an instance-graph JSON dump next to each checkpoint.
    pub dump_graph: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub iou: f64,
    pub max_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub detector: DetectorSection,
    pub disturbance: DisturbanceSection,
    pub weights: WeightConfig,
    pub loss: LossSection,
    pub ema: EmaSection,
    pub optim: OptimSection,
    pub pseudo: PseudoSection,
    pub graph: GraphConfig,
    pub nsa: NsaSection,
    pub stages: StagesSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SyntheticSceneSpec::default();
        let det = ToyDetectorConfig::default();
        let dist = DisturbanceConfig::default();
        let loss = LossConfig::default();
        Self {
            seed: 0,
            dataset: DatasetSection {
                root: "data".into(),
                canvas_size: scene.canvas_size,
                objects_min: scene.objects_min,
                objects_max: scene.objects_max,
                size_min: scene.size_min,
                size_max: scene.size_max,
                source_train: scene.source_train,
                target_train: scene.target_train,
                target_val: scene.target_val,
                fog_alpha: scene.target_style.fog_alpha,
                fog_level: scene.target_style.fog_level,
                noise_sigma: scene.target_style.noise_sigma,
                hue_shift: scene.target_style.hue_shift,
            },
            detector: DetectorSection {
                num_classes: det.num_classes,
                stem_width: det.stem_width,
                width: det.width,
                instance_head: det.instance_head,
                instance_dim: det.instance_dim,
            },
            disturbance: DisturbanceSection {
                s_hid: dist.s_hid,
                v_hid_enabled: dist.v_hid_enabled,
                s_lid: dist.s_lid,
                d_lid: dist.d_lid,
                insd_view: dist.insd_view,
                lid_jitter_scale: dist.lid_jitter_scale,
                brightness_jitter: dist.photometric.brightness_jitter,
                contrast_jitter: dist.photometric.contrast_jitter,
                saturation_jitter: dist.photometric.saturation_jitter,
                blur_sigma_max: dist.photometric.blur_sigma_max,
                noise_sigma_max: dist.photometric.noise_sigma_max,
            },
            weights: WeightConfig::default(),
            loss: LossSection {
                gamma_hid: loss.gamma_hid,
                gamma_lid: loss.gamma_lid,
                gamma_insd: loss.gamma_insd,
                focal_alpha: loss.focal_alpha,
                focal_gamma: loss.focal_gamma,
                ignore_cross_level: loss.ignore_cross_level,
            },
            ema: EmaSection { delta: 0.97 },
            optim: OptimSection {
                lr: 3e-4,
                momentum: 0.9,
                weight_decay: 1e-4,
                grad_clip: 10.0,
            },
            pseudo: PseudoSection {
                threshold: 0.3,
                nms_iou: 0.5,
                refresh_interval: 500,
            },
            graph: GraphConfig::default(),
            nsa: NsaSection {
                hid: true,
                lid: true,
                insd: true,
                clean_det: true,
            },
            stages: StagesSection {
                s1: PretrainSection {
                    iterations: 2000,
                    lr: 0.05,
                    decay_at: 0.75,
                },
                s2: StageSection { iterations: 1000, lr: 0.02 },
                s3: StageSection { iterations: 1000, lr: 0.0 },
            },
            train: TrainSection {
                batch_size: 8,
                checkpoint_interval: 500,
                checkpoint_dir: "runs".into(),
                metrics_log: "runs/metrics.jsonl".into(),
                dump_graph: false,
            },
            eval: EvalSection {
                score_thresh: 0.05,
                nms_iou: 0.5,
                iou: 0.5,
                max_detections: 100,
            },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("interior node");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Parse `raw` as the type of the default leaf `like`.
fn parse_leaf(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = || NsaError::Config(format!("`{key}`: cannot parse `{raw}` as {}", type_name(like)));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad())?;
            if !f.is_finite() {
                return Err(bad());
            }
            Value::from(f)
        }
        Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
        _ => return Err(bad()),
    })
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a nonnegative integer",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        _ => "a value",
    }
}

impl RunConfig {
    fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Apply `key = value` overrides on top of `self`.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut flat = self.flat();
        for (key, raw) in pairs {
            let like = flat.get(key).ok_or_else(|| NsaError::UnknownKey(key.to_string()))?;
            let v = parse_leaf(key, raw, like)?;
            flat.insert(key.to_string(), v);
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| NsaError::Config(format!("invalid value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse configuration text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NsaError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut seen = std::collections::HashSet::new();
        for (k, _) in &pairs {
            if !seen.insert(*k) {
                return Err(NsaError::Config(format!("`{k}` is set twice")));
            }
        }
        RunConfig::default().with_overrides(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| NsaError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every leaf as `key = value`, in key order. Parsing this text gives
    /// back an identical configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            let v = match v {
                Value::String(s) => s,
                Value::Number(n) if n.is_f64() => {
                    // keep a decimal point so the value reparses as a float
                    let f = n.as_f64().unwrap();
                    format!("{f:?}")
                }
                other => other.to_string(),
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.disturbance_config().validate()?;
        self.weights.validate()?;
        self.scene_spec().validate()?;
        let bad = |m: String| Err(NsaError::Config(m));
        if !(0.0..=1.0).contains(&self.ema.delta) {
            return bad(format!("ema.delta must lie in [0, 1], got {}", self.ema.delta));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.graph.window % 2 == 0 {
            return bad("graph.window must be odd".into());
        }
        if !(0.0..=1.0).contains(&self.stages.s1.decay_at) {
            return bad(format!("stages.s1.decay_at must lie in [0, 1], got {}", self.stages.s1.decay_at));
        }
        if self.stages.s2.lr < 0.0 || self.stages.s3.lr < 0.0 {
            return bad("stage learning rates must be nonnegative".into());
        }
        if self.pseudo.refresh_interval == 0 {
            return bad("pseudo.refresh_interval must be positive".into());
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SyntheticSceneSpec {
        let d = &self.dataset;
        SyntheticSceneSpec {
            canvas_size: d.canvas_size,
            num_classes: self.detector.num_classes,
            objects_min: d.objects_min,
            objects_max: d.objects_max,
            size_min: d.size_min,
            size_max: d.size_max,
            max_overlap_iou: SyntheticSceneSpec::default().max_overlap_iou,
            target_style: TargetStyle {
                fog_alpha: d.fog_alpha,
                fog_level: d.fog_level,
                noise_sigma: d.noise_sigma,
                hue_shift: d.hue_shift,
            },
            source_train: d.source_train,
            target_train: d.target_train,
            target_val: d.target_val,
        }
    }

    pub fn detector_config(&self) -> ToyDetectorConfig {
        ToyDetectorConfig {
            num_classes: self.detector.num_classes,
            stem_width: self.detector.stem_width,
            width: self.detector.width,
            instance_head: self.detector.instance_head,
            instance_dim: self.detector.instance_dim,
            ..ToyDetectorConfig::default()
        }
    }

    pub fn disturbance_config(&self) -> DisturbanceConfig {
        let d = &self.disturbance;
        DisturbanceConfig {
            s_hid: d.s_hid,
            v_hid_enabled: d.v_hid_enabled,
            s_lid: d.s_lid,
            d_lid: d.d_lid,
            photometric: PhotometricConfig {
                brightness_jitter: d.brightness_jitter,
                contrast_jitter: d.contrast_jitter,
                saturation_jitter: d.saturation_jitter,
                blur_sigma_max: d.blur_sigma_max,
                noise_sigma_max: d.noise_sigma_max,
            },
            lid_jitter_scale: d.lid_jitter_scale,
            insd_view: d.insd_view,
            out_size: None,
            coarsest_stride: 8,
            rng_seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma_hid: self.loss.gamma_hid,
            gamma_lid: self.loss.gamma_lid,
            gamma_insd: self.loss.gamma_insd,
            focal_alpha: self.loss.focal_alpha,
            focal_gamma: self.loss.focal_gamma,
            ignore_cross_level: self.loss.ignore_cross_level,
            ..LossConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.weights.eta1, c.weights.eta2), (1.3, 1.6));
        assert_eq!((c.loss.gamma_hid, c.loss.gamma_lid, c.loss.gamma_insd), (1.0, 0.006, 0.001));
        assert_eq!(c.ema.delta, 0.97);
        assert_eq!((c.optim.lr, c.optim.momentum, c.optim.weight_decay), (3e-4, 0.9, 1e-4));
        assert_eq!((c.disturbance.s_hid, c.disturbance.s_lid, c.disturbance.d_lid), (3.5, 1.5, 0.25));
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# comment\nema.delta = 0.5  # trailing\nnsa.insd = false\ndisturbance.insd_view = dedicated\nseed = 9\n").unwrap();
        assert_eq!(c.ema.delta, 0.5);
        assert!(!c.nsa.insd);
        assert_eq!(c.disturbance.insd_view, InsdView::Dedicated);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_are_named() {
        match RunConfig::parse("ema.dleta = 0.5") {
            Err(NsaError::UnknownKey(k)) => assert_eq!(k, "ema.dleta"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("ema = 0.5").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("train.batch_size = -1").is_err());
        assert!(RunConfig::parse("nsa.hid = yes").is_err());
        assert!(RunConfig::parse("weights.eta1 = 2.0").is_err());
        assert!(RunConfig::parse("disturbance.insd_view = sometimes").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn effective_text_round_trips() {
        let c = RunConfig::parse("optim.lr = 0.001\nstages.s2.iterations = 7").unwrap();
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert!(c.to_text().contains("loss.gamma_lid = 0.006\n"));
    }
}
