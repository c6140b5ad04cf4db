//! Acceptance criteria 1–10. Each test prints one `criterion N PASS|FAIL`
//! line with the measured numbers, then asserts.
//!
//! Criteria 8 and 9 share one set of training runs (3 seeds × S1, three S2
//! variants, S3); whichever test gets there first trains, the other waits.

mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use nsa::autodiff::Tape;
use nsa::config::RunConfig;
use nsa::detector::{Detector, DetectorOutputs, InstanceOutputs, LevelOutputs, LevelRule, OutputValues, Roi};
use nsa::eval::{class_ap, evaluate};
use nsa::geometry::{apply_geo, invert_geo, transform_labels, BBox, Domain, FrameId, GeoRecord, Image, ImageSample, LabelKind, LabelSet};
use nsa::graph::{build_edges, class_centers, distances, extract_nodes, insd_loss, select_background, GraphConfig, InstanceGraph};
use nsa::losses::{align_maps, det_loss, eca_lid, ica_lid, LossConfig};
use nsa::synthetic::{generate_dataset, SyntheticSceneSpec};
use nsa::tensor::Tensor;
use nsa::trainer::{ema_update, Labeled, NoObserver, Stage, TrainData, Trainer};
use nsa::weightmaps::{build_weight_bundle, sample_centers_psi, smoothness, texture_weights, WeightBundle, WeightConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written straight to stderr so the line survives the test harness's
/// output capture.
fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n} {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_zero_disturbance_identity() {
    let t0 = Instant::now();
    let cfg = RunConfig::default()
        .with_overrides([
            ("disturbance.s_lid", "1"),
            ("disturbance.d_lid", "0"),
            ("disturbance.lid_jitter_scale", "0"),
            ("dataset.source_train", "4"),
            ("dataset.target_train", "1"),
            ("dataset.target_val", "1"),
        ])
        .unwrap();
    let trainer = Trainer::new(&cfg).unwrap();
    let ds = generate_dataset(&cfg.scene_spec(), 11).unwrap();
    let batch: Vec<Labeled> = ds
        .source_train
        .samples()
        .into_iter()
        .map(|s| Labeled {
            labels: s.labels.clone().unwrap(),
            sample: s,
        })
        .collect();
    let params = trainer.detector().init_params(5);
    let out = trainer.nsa_step(&params, &params, &batch, 99).unwrap();
    let c = |k: &str| out.report.components[k];
    let eca = c("eca_lid_pix") + c("eca_lid_ins");
    let ica = c("ica_lid_pix") + c("ica_lid_ins");
    let insd = c("ica_insd");
    let elapsed = t0.elapsed();
    let ok = eca < 1e-6 && ica < 1e-6 && insd < 1e-6 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        ok,
        &format!(
            "eca_lid={eca:.3e} ica_lid={ica:.3e} ica_insd={insd:.3e} (contrastive; nonzero while negatives exist) runtime={:.2}s",
            secs(elapsed)
        ),
    );
    // the consistency terms vanish exactly
    assert!(eca < 1e-6 && ica < 1e-6, "eca_lid {eca}, ica_lid {ica}");
    assert!(insd < 1e-6, "ica_insd under identity is {insd}");
}

// ---------------------------------------------------------------- 2

fn oracle_smoothness(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.gen_range(1..5);
    let h = rng.gen_range(2..10);
    let w = rng.gen_range(2..10);
    let r = [3, 5][rng.gen_range(0..2)];
    let f = rand_tensor(rng, &[c, h, w], -2.0, 2.0);
    let got = smoothness(&f, r);
    max_abs_diff(got.data(), &smoothness_oracle(f.data(), c, h, w, r))
}

fn oracle_texture(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(4..80);
    let (eta1, eta2) = if rng.gen_bool(0.5) {
        (1.3, 1.6)
    } else {
        let a = rng.gen_range(0.2..2.0);
        (a, a + rng.gen_range(0.01..1.0))
    };
    // quantized values put some cells exactly on the interval endpoints
    let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..9) as f64 / 8.0).collect();
    let got = texture_weights(&Tensor::from_vec(&[1, n], s.clone()), eta1, eta2);
    max_abs_diff(got.data(), &texture_oracle(&s, eta1, eta2))
}

fn oracle_psi(rng: &mut ChaCha8Rng) -> f64 {
    let h = rng.gen_range(2..10);
    let w = rng.gen_range(2..10);
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let s: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
    let wm: Vec<f64> = (0..h * w).map(|_| [0.0, 0.1, 1.0][rng.gen_range(0..3)]).collect();
    let got = sample_centers_psi(&Tensor::from_vec(&[h, w], wm.clone()), &Tensor::from_vec(&[h, w], s.clone()), k);
    max_abs_diff(got.data(), &psi_oracle(&wm, &s, h, w, k))
}

fn some_nodes(rng: &mut ChaCha8Rng) -> Vec<nsa::graph::GraphNode> {
    let n = rng.gen_range(1..20);
    let d = rng.gen_range(1..8);
    rand_nodes(rng, n, d, 3)
}

fn oracle_centers(rng: &mut ChaCha8Rng) -> f64 {
    let nodes = some_nodes(rng);
    let got = class_centers(&nodes);
    let want = centers_oracle(&nodes);
    assert_eq!(got.len(), want.len(), "one center per present class");
    got.iter()
        .map(|(k, c)| max_abs_diff(c, &want[k]))
        .fold(0.0, f64::max)
}

fn oracle_edges(rng: &mut ChaCha8Rng) -> f64 {
    let nodes = some_nodes(rng);
    let got = build_edges(&nodes);
    let want: Vec<f64> = edges_oracle(&nodes).into_iter().flatten().collect();
    max_abs_diff(&got, &want)
}

fn oracle_background(rng: &mut ChaCha8Rng) -> bool {
    let nodes = some_nodes(rng);
    let n_b = rng.gen_range(0..6);
    let e = edges_oracle(&nodes);
    let mut ranked: Vec<(f64, usize)> = (0..nodes.len())
        .filter(|&i| nodes[i].class_id == 0)
        .map(|i| {
            let m = (0..nodes.len())
                .filter(|&j| nodes[j].class_id > 0)
                .map(|j| e[i][j])
                .fold(f64::INFINITY, f64::min);
            (m, i)
        })
        .collect();
    ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // rounding may order near-ties differently; compare the oracle scores of
    // the chosen nodes rank by rank
    let score: std::collections::HashMap<usize, f64> = ranked.iter().map(|&(m, i)| (i, m)).collect();
    let got = select_background(&nodes, &build_edges(&nodes), n_b);
    let mut distinct = got.clone();
    distinct.sort_unstable();
    distinct.dedup();
    got.len() == n_b.min(ranked.len())
        && distinct.len() == got.len()
        && got
            .iter()
            .zip(&ranked)
            .all(|(i, want)| score.get(i).is_some_and(|s| (s - want.0).abs() < 1e-12))
}

fn oracle_distances(rng: &mut ChaCha8Rng) -> f64 {
    let nodes = some_nodes(rng);
    let centers = class_centers(&nodes);
    let bg: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].class_id == 0).take(4).collect();
    let (ct, dbg) = distances(&nodes, &centers, &bg);
    let want_centers = centers_oracle(&nodes);
    let mut worst: f64 = 0.0;
    for (i, n) in nodes.iter().enumerate() {
        for (k, (cls, _)) in centers.iter().enumerate() {
            worst = worst.max((ct[i * centers.len() + k] - cos(&n.feature_student, &want_centers[cls])).abs());
        }
        for (k, &j) in bg.iter().enumerate() {
            worst = worst.max((dbg[i * bg.len() + k] - cos(&n.feature_student, &nodes[j].feature_teacher)).abs());
        }
    }
    worst
}

fn oracle_insd(rng: &mut ChaCha8Rng) -> f64 {
    let d = rng.gen_range(1..8);
    let n = rng.gen_range(1..20);
    let nodes = rand_nodes(rng, n, d, 3);
    let g = InstanceGraph::build(nodes.clone(), rng.gen_range(0..5));
    let want = insd_oracle(&nodes, &g.background);
    let mut tape = Tape::new();
    let src = tape.param(Tensor::from_vec(
        &[nodes.len(), d],
        nodes.iter().flat_map(|n| n.feature_student.clone()).collect(),
    ));
    let l = insd_loss(&mut tape, &[g.clone()], &[src], 3);
    (tape.value(l).item() - want).abs().max((g.loss_value() - want).abs())
}

#[test]
fn criterion_02_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 200;
    let mut worst = Vec::new();
    type Check = fn(&mut ChaCha8Rng) -> f64;
    let checks: [(&str, Check); 7] = [
        ("smoothness", oracle_smoothness),
        ("texture_weights", oracle_texture),
        ("sample_centers_psi", oracle_psi),
        ("class_centers", oracle_centers),
        ("build_edges", oracle_edges),
        ("distances", oracle_distances),
        ("insd_loss", oracle_insd),
    ];
    for (name, f) in checks {
        let m = (0..trials).map(|_| f(&mut rng)).fold(0.0, f64::max);
        worst.push((name, m));
    }
    let bg_ok = (0..trials).all(|_| oracle_background(&mut rng));
    let elapsed = t0.elapsed();
    let ok = worst.iter().all(|(_, m)| *m < 1e-6) && bg_ok && elapsed < Duration::from_secs(120);
    let detail: Vec<String> = worst.iter().map(|(n, m)| format!("{n}={m:.1e}")).collect();
    verdict(
        2,
        ok,
        &format!(
            "{trials} inputs each; max |diff| {} select_background={} runtime={:.2}s",
            detail.join(" "),
            if bg_ok { "exact" } else { "MISMATCH" },
            secs(elapsed)
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 3

const CLASSES: usize = 3;

/// Two-level outputs of a 32×32 batch plus an instance head over `rois`.
fn random_outputs(rng: &mut ChaCha8Rng, n: usize, fdim: usize, rois: &[Roi]) -> OutputValues {
    let levels = [(8usize, 8usize), (4, 4)]
        .iter()
        .map(|&(h, w)| LevelOutputs {
            features: rand_tensor(rng, &[n, fdim, h, w], -1.0, 1.0),
            class: rand_tensor(rng, &[n, CLASSES, h, w], -3.0, 1.0),
            boxes: rand_tensor(rng, &[n, 4, h, w], 1.0, 20.0),
            centerness: rand_tensor(rng, &[n, 1, h, w], -2.0, 2.0),
        })
        .collect();
    let r = rois.len();
    DetectorOutputs {
        levels,
        instance: Some(InstanceOutputs {
            features: rand_tensor(rng, &[r, fdim], -1.0, 1.0),
            class: rand_tensor(rng, &[r, CLASSES + 1], -2.0, 2.0),
            boxes: rand_tensor(rng, &[r, 4], -0.5, 0.5),
            rois: rois.to_vec(),
            kept: (0..r).collect(),
        }),
        strides: vec![4, 8],
    }
}

fn toy_labels() -> Vec<LabelSet> {
    let f = |i| FrameId(i);
    vec![
        LabelSet::new(
            f(0),
            LabelKind::GroundTruth,
            vec![BBox::new(3.0, 4.0, 17.0, 15.0, 0), BBox::new(10.0, 12.0, 30.0, 31.0, 2)],
        ),
        LabelSet::new(f(1), LabelKind::GroundTruth, vec![BBox::new(1.0, 1.0, 31.0, 27.0, 1)]),
    ]
}

fn toy_rois(labels: &[LabelSet]) -> Vec<Roi> {
    let mut rois = Vec::new();
    for (b, l) in labels.iter().enumerate() {
        for bx in &l.boxes {
            rois.push(Roi { batch: b, bbox: *bx });
            rois.push(Roi {
                batch: b,
                bbox: BBox::new(bx.x_min + 1.5, bx.y_min, bx.x_max + 1.5, bx.y_max, bx.class_id),
            });
        }
        rois.push(Roi {
            batch: b,
            bbox: BBox::new(0.0, 0.0, 6.0, 6.0, 0),
        });
    }
    rois
}

/// Bundles from the teacher's features with instance classes from the rois.
fn toy_bundles(teacher: &OutputValues, labels: &[LabelSet], rois: &[Roi]) -> Vec<WeightBundle> {
    let wcfg = WeightConfig::default();
    labels
        .iter()
        .enumerate()
        .map(|(b, lab)| {
            let feats: Vec<Tensor> = teacher.levels.iter().map(|l| l.features.image(b)).collect();
            let m_ins: Vec<usize> = rois
                .iter()
                .filter(|r| r.batch == b)
                .map(|r| {
                    lab.boxes
                        .iter()
                        .find(|g| g.iou(&r.bbox) >= 0.5)
                        .map_or(0, |g| g.class_id + 1)
                })
                .collect();
            build_weight_bundle(&feats, lab, &teacher.strides, &LevelRule::default(), &wcfg, &m_ins)
        })
        .collect()
}

#[test]
fn criterion_03_gradient_checks() {
    let t0 = Instant::now();
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels = toy_labels();
    let rois = toy_rois(&labels);
    let mut results = Vec::new();

    let student = random_outputs(&mut rng, 2, 4, &rois);
    let cfg = LossConfig::default();
    let rule = LevelRule::default();
    let det = |tape: &mut Tape, o: &DetectorOutputs<_>| {
        let d = det_loss(tape, o, &labels, &rule, &cfg);
        tape.add(d.cls, d.reg)
    };
    results.push(("det_loss", grad_check(&student, eps, &det)));

    // the student plays its own perturbed teacher so masks and weights are nontrivial
    let teacher = {
        let mut t = student.clone();
        for leaf in leaves_mut(&mut t) {
            for v in leaf.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        t
    };
    let bundles = toy_bundles(&teacher, &labels, &rois);
    let b_cells: f64 = bundles.iter().flat_map(|b| &b.layers).map(|l| l.b.sum()).sum();
    assert!(b_cells > 0.0, "sampled weights must select some cells");
    let eca = |tape: &mut Tape, o: &DetectorOutputs<_>| {
        let t = eca_lid(tape, &teacher, o, &bundles);
        tape.add(t.pix, t.ins)
    };
    results.push(("eca_lid", grad_check(&student, eps, &eca)));
    let ica = |tape: &mut Tape, o: &DetectorOutputs<_>| {
        let t = ica_lid(tape, &teacher, o, &bundles);
        tape.add(t.pix, t.ins)
    };
    results.push(("ica_lid", grad_check(&student, eps, &ica)));

    // graphs over both pixel levels and the instance layer, held fixed while
    // the student's features move
    let areas: Vec<f64> = rois.iter().map(|r| r.bbox.area()).collect();
    let classes: Vec<usize> = bundles.iter().flat_map(|b| b.m_ins.iter().copied()).collect();
    let gcfg = GraphConfig {
        area_lo: 1.0,
        ..GraphConfig::default()
    };
    let layers = extract_nodes(&teacher, &student, &labels, &bundles, &classes, &areas, &gcfg);
    let graphs: Vec<InstanceGraph> = layers.into_iter().map(|n| InstanceGraph::build(n, 4)).collect();
    let fg_layers = graphs.iter().filter(|g| g.weights.iter().sum::<f64>() > 0.0).count();
    assert!(fg_layers >= 2, "need foreground nodes in several layers, got {fg_layers}");
    let insd = |tape: &mut Tape, o: &DetectorOutputs<_>| {
        let mut sources: Vec<_> = o.levels.iter().map(|l| l.features).collect();
        sources.push(o.instance.as_ref().unwrap().features);
        insd_loss(tape, &graphs, &sources, gcfg.window)
    };
    results.push(("insd_loss", grad_check(&student, eps, &insd)));

    let elapsed = t0.elapsed();
    let ok = results.iter().all(|(_, (e, _))| *e < 1e-4) && elapsed < Duration::from_secs(120);
    let detail: Vec<String> = results
        .iter()
        .map(|(n, (e, k))| format!("{n}: max rel {e:.1e} over {k} scalars"))
        .collect();
    verdict(3, ok, &format!("eps={eps} {}; runtime={:.2}s", detail.join(", "), secs(elapsed)));
    assert!(ok);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_ema_exactness() {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let trainer = Trainer::new(&cfg).unwrap();
    let det = trainer.detector();
    let student = det.init_params(1);
    let mut teacher = det.init_params(2);
    let delta = cfg.ema.delta;
    assert_eq!(delta, 0.97);
    let d0 = teacher.max_abs_diff(&student);
    // scalar reference: the same recurrence written out per element
    let mut reference: Vec<Vec<f64>> = teacher.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut worst_ratio: f64 = 0.0;
    let mut bit_exact = true;
    for n in 1..=10 {
        ema_update(&mut teacher, &student, delta).unwrap();
        for (r, s) in reference.iter_mut().zip(student.tensors()) {
            for (x, y) in r.iter_mut().zip(s.data()) {
                *x = delta * *x + (1.0 - delta) * y;
            }
        }
        bit_exact &= teacher
            .tensors()
            .iter()
            .zip(&reference)
            .all(|(t, r)| t.data().iter().zip(r).all(|(a, b)| a.to_bits() == b.to_bits()));
        let dn = teacher.max_abs_diff(&student);
        let want = d0 * delta.powi(n);
        worst_ratio = worst_ratio.max((dn / want - 1.0).abs());
    }
    let elapsed = t0.elapsed();
    let ok = bit_exact && worst_ratio < 1e-12 && elapsed < Duration::from_secs(5);
    verdict(
        4,
        ok,
        &format!(
            "bit-exact vs scalar recurrence: {bit_exact}; max |‖θt−θs‖∞ / (0.97ⁿ·d0) − 1| = {worst_ratio:.1e} over n=1..10; runtime={:.3}s",
            secs(elapsed)
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 5

fn random_record(rng: &mut ChaCha8Rng) -> GeoRecord {
    let src: (usize, usize) = (rng.gen_range(8..160), rng.gen_range(8..160));
    let crop = (rng.gen_range(8..160), rng.gen_range(8..160));
    let scale = rng.gen_range(0.25..4.0);
    let (rw, rh) = (scale * src.0 as f64, scale * src.1 as f64);
    GeoRecord::new(
        FrameId(rng.gen()),
        src,
        scale,
        rng.gen_bool(0.5),
        (rng.gen_range(-0.3 * rw..0.9 * rw), rng.gen_range(-0.3 * rh..0.9 * rh)),
        crop,
        (rng.gen_range(-16.0..16.0), rng.gen_range(-16.0..16.0)),
        true,
    )
}

#[test]
fn criterion_05_geometry_round_trips() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_box: f64 = 0.0;
    let mut worst_compose: f64 = 0.0;
    let mut skipped = 0;
    let mut checked = 0;
    while checked < 10_000 {
        let rec = random_record(&mut rng);
        let id = rec.then(&invert_geo(&rec)).unwrap();
        let want = GeoRecord {
            reflect_pad: id.reflect_pad,
            ..GeoRecord::identity(rec.src_frame, rec.src_size)
        };
        worst_compose = worst_compose.max(id.max_field_diff(&want));

        // a box inside both the source image and the crop window: sample it
        // in the intersection of the image with the window's preimage
        let (cw, ch) = (rec.crop_size.0 as f64, rec.crop_size.1 as f64);
        let (ax, ay) = rec.unmap_point(0.0, 0.0);
        let (bx, by) = rec.unmap_point(cw, ch);
        let lo = (ax.min(bx).max(0.0), ay.min(by).max(0.0));
        let hi = (ax.max(bx).min(rec.src_size.0 as f64), ay.max(by).min(rec.src_size.1 as f64));
        if hi.0 - lo.0 < 1.0 || hi.1 - lo.1 < 1.0 {
            skipped += 1;
            continue;
        }
        let x0 = rng.gen_range(lo.0..hi.0 - 0.5);
        let y0 = rng.gen_range(lo.1..hi.1 - 0.5);
        let b = BBox::new(
            x0,
            y0,
            rng.gen_range(x0 + 0.5..=hi.0),
            rng.gen_range(y0 + 0.5..=hi.1),
            rng.gen_range(0..3),
        );
        let labels = LabelSet::new(rec.src_frame, LabelKind::GroundTruth, vec![b]);
        let there = transform_labels(&rec, &labels).unwrap();
        let back = transform_labels(&invert_geo(&rec), &there).unwrap();
        assert_eq!(back.boxes.len(), 1);
        worst_box = worst_box.max(back.boxes[0].max_deviation(&b));
        checked += 1;
    }

    // image flip involution
    let mut worst_flip: f64 = 0.0;
    for k in 0..20 {
        let (w, h) = (rng.gen_range(4..40), rng.gen_range(4..40));
        let mut img = Image::new(w, h);
        img.data_mut().iter_mut().for_each(|v| *v = rng.gen());
        let sample = ImageSample::new(img.clone(), Domain::Source, FrameId(k));
        let flip = GeoRecord::centered(sample.frame, (w, h), 1.0, true, (w, h), (0.0, 0.0));
        let once = apply_geo(&flip, &sample).unwrap();
        let flip2 = GeoRecord::centered(once.frame, (w, h), 1.0, true, (w, h), (0.0, 0.0));
        let twice = apply_geo(&flip2, &once).unwrap();
        let d = twice
            .pixels
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        worst_flip = worst_flip.max(d);
    }

    // feature-map alignment under a flip, applied twice
    let mut worst_align: f64 = 0.0;
    for _ in 0..20 {
        let maps = random_outputs(&mut rng, 2, 3, &[]);
        let maps = DetectorOutputs { instance: None, ..maps };
        let flips: Vec<GeoRecord> = (0..2)
            .map(|b| GeoRecord::centered(FrameId(b), (32, 32), 1.0, true, (32, 32), (0.0, 0.0)))
            .collect();
        let targets = [(8, 8), (4, 4)];
        let once = align_maps(&maps, &flips, &targets);
        let twice = align_maps(&once, &flips, &targets);
        let mut a = maps.clone();
        let mut b = twice.clone();
        for (x, y) in leaves_mut(&mut a).into_iter().zip(leaves_mut(&mut b)) {
            worst_align = worst_align.max(max_abs_diff(x.data(), y.data()));
        }
    }

    let elapsed = t0.elapsed();
    let ok = worst_box < 1e-6
        && worst_compose < 1e-9
        && worst_flip < 1e-6
        && worst_align < 1e-6
        && elapsed < Duration::from_secs(30);
    verdict(
        5,
        ok,
        &format!(
            "10^4 records ({skipped} disjoint windows redrawn): box round trip {worst_box:.1e}px, compose∘invert {worst_compose:.1e}; flip involution {worst_flip:.1e}; align involution {worst_align:.1e}; runtime={:.2}s",
            secs(elapsed)
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_weight_map_structure() {
    let t0 = Instant::now();
    let spec = SyntheticSceneSpec {
        source_train: 24,
        target_train: 24,
        target_val: 4,
        ..SyntheticSceneSpec::default()
    };
    let ds = generate_dataset(&spec, 6).unwrap();
    let cfg = RunConfig::default();
    let trainer = Trainer::new(&cfg).unwrap();
    let det = trainer.detector();
    let params = det.init_params(6);
    let mut support_ok = true;
    let mut values_ok = true;
    let (mut b_cells, mut b_inside) = (0usize, 0usize);
    let (mut a_in_gt, mut gt_cells, mut a_outside) = (0usize, 0usize, 0usize);
    for split in [&ds.source_train, &ds.target_train] {
        for s in split.samples() {
            let labels = s.labels.clone().unwrap();
            let out = det.eval(&params, &Tensor::stack(&[s.pixels.to_tensor()]), None);
            let feats: Vec<Tensor> = out.levels.iter().map(|l| l.features.image(0)).collect();
            let wb = build_weight_bundle(&feats, &labels, det.strides(), det.level_rule(), &cfg.weights, &[]);
            for (level, (lw, &stride)) in wb.layers.iter().zip(det.strides()).enumerate() {
                let (h, w) = lw.a.dims2();
                for i in 0..h {
                    for j in 0..w {
                        let k = i * w + j;
                        let (a, wt, b) = (lw.a.data()[k], lw.w_t.data()[k], lw.b.data()[k]);
                        values_ok &= [0.0, 0.1, 1.0].contains(&wt);
                        let (x, y) = ((j as f64 + 0.5) * stride as f64, (i as f64 + 0.5) * stride as f64);
                        let own: Vec<&BBox> = labels
                            .boxes
                            .iter()
                            .filter(|g| det.level_rule().level_for(g) == level && g.contains(x, y))
                            .collect();
                        if !own.is_empty() {
                            gt_cells += 1;
                            a_in_gt += (a == 1.0) as usize;
                        } else {
                            a_outside += (a != 0.0) as usize;
                        }
                        if b != 0.0 {
                            b_cells += 1;
                            support_ok &= a == 1.0 && wt == 1.0;
                            b_inside += labels.boxes.iter().any(|g| g.contains(x, y)) as usize;
                        }
                    }
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    let ok = support_ok
        && values_ok
        && b_cells > 0
        && b_inside == b_cells
        && a_in_gt == gt_cells
        && a_outside == 0
        && elapsed < Duration::from_secs(30);
    verdict(
        6,
        ok,
        &format!(
            "48 scenes: supp(B)⊆supp(A)∩{{W_t=1}}: {support_ok}; B cells inside GT {b_inside}/{b_cells}; A=1 on {a_in_gt}/{gt_cells} GT cells, {a_outside} background cells; W_t ∈ {{0,0.1,1}}: {values_ok}; runtime={:.2}s",
            secs(elapsed)
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_ap_evaluator() {
    let g1 = BBox::new(0.0, 0.0, 10.0, 10.0, 0);
    let g2 = BBox::new(20.0, 20.0, 30.0, 30.0, 0);
    // ranked: TP, FP, TP → precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    let preds = vec![vec![
        g1.with_score(0.9),
        BBox::new(50.0, 50.0, 60.0, 60.0, 0).with_score(0.8),
        BBox::new(20.0, 21.0, 30.0, 31.0, 0).with_score(0.7),
    ]];
    let gts = vec![vec![g1, g2]];
    let manual = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
    let got = class_ap(&preds, &gts, 0, 0.5).unwrap();

    let perfect_gts = vec![
        vec![g1, BBox::new(5.0, 30.0, 25.0, 40.0, 1)],
        vec![BBox::new(2.0, 2.0, 40.0, 33.0, 2)],
    ];
    let perfect: Vec<Vec<BBox>> = perfect_gts
        .iter()
        .map(|g| g.iter().map(|b| b.with_score(0.5)).collect())
        .collect();
    let map = evaluate(&perfect, &perfect_gts, 3, 0.5).map;
    let ok = got == manual && map == 1.0;
    verdict(
        7,
        ok,
        &format!("hand PR case AP={got:.6} (manual {manual:.6}, exact match {}); perfect mAP={map}", got == manual),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 8 & 9

/// Target mAP after each stage, and wall-clock seconds of each stage run
/// (S1, the three S2 variants, S3).
#[derive(Clone, Copy, Debug)]
struct SeedRun {
    seed: u64,
    s1: f64,
    hid: f64,
    hid_lid: f64,
    full: f64,
    s3: f64,
    t_s1: f64,
    t_hid: f64,
    t_hid_lid: f64,
    t_full: f64,
    t_s3: f64,
}

impl SeedRun {
    /// The pipeline criterion 8 describes: S1 → full S2 → S3.
    fn trend_secs(&self) -> f64 {
        self.t_s1 + self.t_full + self.t_s3
    }

    /// S1 plus the three S2 variants.
    fn ablation_secs(&self) -> f64 {
        self.t_s1 + self.t_hid + self.t_hid_lid + self.t_full
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let base = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let ds = generate_dataset(&base.scene_spec(), seed).unwrap();
    let data = TrainData::from_dataset(&ds);
    let val = ds.target_val.samples();

    let trainer = Trainer::new(&base).unwrap();
    let t = Instant::now();
    let mut s1 = trainer.init_state();
    trainer.run_stage(&mut s1, Stage::S1, &data, &mut NoObserver).unwrap();
    let t_s1 = secs(t.elapsed());
    let s1_map = trainer.evaluate(&s1.teacher, &val).unwrap().map;

    let s2 = |lid: &str, insd: &str| {
        let cfg = base.with_overrides([("nsa.lid", lid), ("nsa.insd", insd)]).unwrap();
        let tr = Trainer::new(&cfg).unwrap();
        let t = Instant::now();
        let mut st = s1.clone();
        tr.run_stage(&mut st, Stage::S2, &data, &mut NoObserver).unwrap();
        let elapsed = secs(t.elapsed());
        let map = tr.evaluate(&st.teacher, &val).unwrap().map;
        (st, map, elapsed)
    };
    let (_, hid, t_hid) = s2("false", "false");
    let (_, hid_lid, t_hid_lid) = s2("true", "false");
    let (mut full_state, full, t_full) = s2("true", "true");

    let t = Instant::now();
    trainer.run_stage(&mut full_state, Stage::S3, &data, &mut NoObserver).unwrap();
    let t_s3 = secs(t.elapsed());
    let s3 = trainer.evaluate(&full_state.teacher, &val).unwrap().map;
    let r = SeedRun {
        seed,
        s1: s1_map,
        hid,
        hid_lid,
        full,
        s3,
        t_s1,
        t_hid,
        t_hid_lid,
        t_full,
        t_s3,
    };
    let line = format!(
        "seed {}: S1 {:.4} | S2 HID {:.4}, HID+LID {:.4}, full {:.4} | S3 {:.4} (stage seconds {:.0}/{:.0}/{:.0}/{:.0}/{:.0})\n",
        r.seed, r.s1, r.hid, r.hid_lid, r.full, r.s3, r.t_s1, r.t_hid, r.t_hid_lid, r.t_full, r.t_s3
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    r
}

fn stage_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| (0..3).map(run_seed).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_08_stage_trend() {
    let t0 = Instant::now();
    let runs = stage_runs();
    let s1 = median(runs.iter().map(|r| r.s1).collect());
    let s2 = median(runs.iter().map(|r| r.full).collect());
    let s3 = median(runs.iter().map(|r| r.s3).collect());
    let total: f64 = runs.iter().map(SeedRun::trend_secs).sum();
    let ok = s2 >= s1 + 0.05 && s3 >= s2 - 0.005 && total <= 45.0 * 60.0;
    verdict(
        8,
        ok,
        &format!(
            "median target mAP over seeds 0-2: S1 {:.1} → S2 {:.1} → S3 {:.1} points (need S2 ≥ S1+5, S3 ≥ S2−0.5); training time {:.0}s (waited {:.0}s)",
            100.0 * s1,
            100.0 * s2,
            100.0 * s3,
            total,
            secs(t0.elapsed())
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_ablation_direction() {
    let runs = stage_runs();
    let d_lid = median(runs.iter().map(|r| r.hid_lid - r.hid).collect());
    let d_insd = median(runs.iter().map(|r| r.full - r.hid_lid).collect());
    let d_full = median(runs.iter().map(|r| r.full - r.hid).collect());
    let medians = (
        median(runs.iter().map(|r| r.hid).collect()),
        median(runs.iter().map(|r| r.hid_lid).collect()),
        median(runs.iter().map(|r| r.full).collect()),
    );
    let total: f64 = runs.iter().map(SeedRun::ablation_secs).sum();
    let ok = d_lid >= -0.005 && d_insd >= -0.005 && d_full >= 0.01 && total <= 45.0 * 60.0;
    verdict(
        9,
        ok,
        &format!(
            "S2 target mAP medians HID {:.1} / +LID {:.1} / +InsD {:.1}; median per-seed change +LID {:+.2}, +InsD {:+.2}, full vs HID {:+.2} points (need ≥ −0.5, ≥ −0.5, ≥ +1); training time {:.0}s",
            100.0 * medians.0,
            100.0 * medians.1,
            100.0 * medians.2,
            100.0 * d_lid,
            100.0 * d_insd,
            100.0 * d_full,
            total
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 10

fn cli_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let conf = dir.join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "dataset.root = {root}\n\
             dataset.source_train = 12\n\
             dataset.target_train = 12\n\
             dataset.target_val = 6\n\
             train.batch_size = 4\n\
             train.checkpoint_interval = 3\n\
             train.checkpoint_dir = {ckpt}\n\
             train.metrics_log = {ckpt}/metrics.jsonl\n\
             stages.s1.iterations = 8\n\
             stages.s2.iterations = 5\n\
             stages.s3.iterations = 5\n\
             pseudo.refresh_interval = 2\n\
             pseudo.threshold = 0.05\n",
            root = dir.join("data").display(),
            ckpt = dir.join("ckpt").display(),
        ),
    )
    .unwrap();
    let nsa = env!("CARGO_BIN_EXE_nsa");
    let mut steps: Vec<Vec<&str>> = vec![vec!["make-dataset"]];
    for s in ["s1", "s2", "s3"] {
        steps.push(vec!["train", "--stage", s]);
    }
    for args in steps {
        let out = Command::new(nsa)
            .arg("--config")
            .arg(&conf)
            .arg("--seed")
            .arg("4")
            .arg("--single-thread")
            .args(&args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.join("ckpt"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt" || e == "jsonl"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = cli_run(a.path());
    let fb = cli_run(b.path());
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    let same_names = names == fb.iter().map(|f| f.0.as_str()).collect::<Vec<_>>();
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let has_all = ["s1.ckpt", "s2.ckpt", "s3.ckpt", "metrics.jsonl"]
        .iter()
        .all(|n| names.contains(n));
    let ok = same_names && differing.is_empty() && has_all;
    verdict(
        10,
        ok,
        &format!(
            "two --single-thread CLI runs (S1→S2→S3): {} files compared byte for byte, {} differ {:?}; runtime={:.1}s",
            names.len(),
            differing.len(),
            differing,
            secs(t0.elapsed())
        ),
    );
    assert!(ok);
}
