use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nsa::config::RunConfig;
use nsa::detector::Detector;
use nsa::geometry::{BBox, FrameId, LabelKind, LabelSet};
use nsa::losses::LossReport;
use nsa::synthetic::{generate_dataset, load_dataset, load_split, write_dataset, AnnotationRecord};
use nsa::trainer::{load_checkpoint, save_checkpoint, Observer, Stage, TrainData, TrainState, Trainer};
use nsa::weightmaps::{build_weight_bundle, export_heatmaps};
use nsa::{NsaError, Result};

#[derive(Parser)]
#[command(name = "nsa", version, about = "Network stability analysis for domain-adaptive detection")]
struct Cli {
    /// Config file of `dotted.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on one thread (bit-reproducible).
    #[arg(long, global = true)]
    single_thread: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic two-domain dataset.
    MakeDataset {
        /// Defaults to `dataset.root`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Continue from this checkpoint instead of the stage's default input.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class AP and mAP of a checkpoint's teacher on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target_val")]
        split: String,
        /// Score the student instead of the teacher.
        #[arg(long)]
        student: bool,
        /// Where to write the JSON report; defaults next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heat maps of the consistency weights for one image.
    VisualizeWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "weights")]
        out: PathBuf,
    },
}

fn exit_code(e: &NsaError) -> u8 {
    match e {
        NsaError::Config(_) | NsaError::UnknownKey(_) => 2,
        NsaError::State(_) | NsaError::Checkpoint { .. } => 3,
        NsaError::Io { .. } | NsaError::Image { .. } | NsaError::Json { .. } | NsaError::Dataset(_) => 4,
        _ => 1,
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| NsaError::Config(format!("override `{o}` is not KEY=VALUE")))?;
        pairs.push((k.trim(), v.trim()));
    }
    let seed = cli.seed.map(|s| s.to_string());
    if let Some(s) = &seed {
        pairs.push(("seed", s));
    }
    let cfg = base.with_overrides(pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn stage_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    Path::new(&cfg.train.checkpoint_dir).join(format!("{stage}.ckpt"))
}

struct FileObserver {
    metrics: BufWriter<fs::File>,
    dir: PathBuf,
    stage: Stage,
    final_path: PathBuf,
    total: u64,
}

impl Observer for FileObserver {
    fn report(&mut self, r: &LossReport) -> Result<()> {
        writeln!(self.metrics, "{}", r.to_json_line()).map_err(|e| NsaError::io(&self.dir, e))
    }

    fn checkpoint(&mut self, s: &TrainState) -> Result<()> {
        self.metrics.flush().map_err(|e| NsaError::io(&self.dir, e))?;
        let path = if s.stage_done {
            self.final_path.clone()
        } else {
            self.dir.join(format!("{}_{:06}.ckpt", self.stage, s.stage_iteration))
        };
        save_checkpoint(s, &path)?;
        eprintln!("checkpoint {} ({}/{} {})", path.display(), s.stage_iteration, self.total, self.stage);
        Ok(())
    }

    fn graphs(&mut self, iteration: u64, dump: &serde_json::Value) -> Result<()> {
        let path = self.dir.join(format!("graph_{iteration:06}.json"));
        let text = serde_json::to_string(dump).expect("graph dump serializes");
        fs::write(&path, text).map_err(|e| NsaError::io(&path, e))
    }
}

fn train(cfg: &RunConfig, stage: Stage, resume: Option<&Path>) -> Result<()> {
    let trainer = Trainer::new(cfg)?;
    let mut state = match (resume, stage.prerequisite()) {
        (Some(p), _) => load_checkpoint(p)?,
        (None, None) => trainer.init_state(),
        (None, Some(pre)) => {
            let p = stage_path(cfg, pre);
            if !p.exists() {
                return Err(NsaError::State(format!(
                    "stage {stage} starts from the {pre} checkpoint {}, which does not exist",
                    p.display()
                )));
            }
            load_checkpoint(&p)?
        }
    };
    if state.seed != cfg.seed {
        eprintln!("note: checkpoint seed {} overrides config seed {}", state.seed, cfg.seed);
    }
    let ds = load_dataset(Path::new(&cfg.dataset.root))?;
    let data = TrainData::from_dataset(&ds);

    let dir = PathBuf::from(&cfg.train.checkpoint_dir);
    fs::create_dir_all(&dir).map_err(|e| NsaError::io(&dir, e))?;
    let cfg_path = dir.join(format!("{stage}.config"));
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| NsaError::io(&cfg_path, e))?;
    let log = PathBuf::from(&cfg.train.metrics_log);
    if let Some(parent) = log.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| NsaError::io(parent, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log)
        .map_err(|e| NsaError::io(&log, e))?;
    let mut obs = FileObserver {
        metrics: BufWriter::new(file),
        final_path: stage_path(cfg, stage),
        dir,
        stage,
        total: match stage {
            Stage::S1 => cfg.stages.s1.iterations,
            Stage::S2 => cfg.stages.s2.iterations,
            Stage::S3 => cfg.stages.s3.iterations,
        },
    };
    trainer.run_stage(&mut state, stage, &data, &mut obs)?;
    let report = trainer.evaluate(&state.teacher, &ds.target_val.samples())?;
    println!("{stage} done at iteration {}: target mAP {:.4}", state.iteration, report.map);
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, ckpt: &Path, split: &str, student: bool, out: Option<&Path>) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let trainer = Trainer::new(cfg)?;
    let data = load_split(Path::new(&cfg.dataset.root), split)?;
    let params = if student { &state.student } else { &state.teacher };
    let report = trainer.evaluate(params, &data.samples())?;
    for (c, ap) in report.per_class.iter().enumerate() {
        match ap {
            Some(ap) => println!("class {c}: AP {ap:.4}"),
            None => println!("class {c}: no ground truth"),
        }
    }
    println!("mAP@{}: {:.4}", report.iou_threshold, report.map);
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.with_file_name(format!("eval_{split}.json")));
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text).map_err(|e| NsaError::io(&path, e))
}

/// Ground truth for `image` when it sits in a dataset split directory.
fn labels_next_to(image: &Path) -> Result<Option<Vec<BBox>>> {
    let Some(split_dir) = image.parent().and_then(Path::parent) else {
        return Ok(None);
    };
    let ann = split_dir.join("annotations.json");
    if !ann.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&ann).map_err(|e| NsaError::io(&ann, e))?;
    let records: Vec<AnnotationRecord> =
        serde_json::from_str(&text).map_err(|source| NsaError::Json { path: ann.clone(), source })?;
    let name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    Ok(records.into_iter().find(|r| r.file == name).map(|r| {
        r.boxes
            .iter()
            .map(|b| BBox::new(b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64, b.class_id))
            .collect()
    }))
}

fn visualize(cfg: &RunConfig, ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint(ckpt)?;
    let trainer = Trainer::new(cfg)?;
    let img = nsa::geometry::Image::load_png(image)?;
    let boxes = labels_next_to(image)?.unwrap_or_default();
    if boxes.is_empty() {
        eprintln!("note: no annotations found for {}; foreground masks will be empty", image.display());
    }
    let labels = LabelSet::new(FrameId(0), LabelKind::GroundTruth, boxes);
    let det = trainer.detector();
    let outputs = det.eval(&state.teacher, &nsa::tensor::Tensor::stack(&[img.to_tensor()]), None);
    let feats: Vec<_> = outputs.levels.iter().map(|l| l.features.image(0)).collect();
    let bundle = build_weight_bundle(&feats, &labels, det.strides(), det.level_rule(), &cfg.weights, &[]);
    for p in export_heatmaps(&bundle, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if cli.single_thread {
        // a second initialization fails only if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    eprintln!("# effective config\n{}", cfg.to_text());
    match &cli.command {
        Command::MakeDataset { out } => {
            let root = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.dataset.root));
            let ds = generate_dataset(&cfg.scene_spec(), cfg.seed)?;
            write_dataset(&ds, &root)?;
            println!("dataset written to {}", root.display());
            Ok(())
        }
        Command::Train { stage, resume } => train(&cfg, *stage, resume.as_deref()),
        Command::Evaluate {
            checkpoint,
            split,
            student,
            out,
        } => evaluate_cmd(&cfg, checkpoint, split, *student, out.as_deref()),
        Command::VisualizeWeights { checkpoint, image, out } => visualize(&cfg, checkpoint, image, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
