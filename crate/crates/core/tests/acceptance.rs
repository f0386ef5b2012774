//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a failure status when any criterion fails.
//!
//! The directional experiments train a teacher once (cached under the cargo
//! target directory) and about thirty students on one CPU.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clockdistill::autograd::Graph;
use clockdistill::data::{Image, Sample};
use clockdistill::detector::{
    detection_loss, BackboneFeatures, Detector, DetectorConfig, ExtraQueries, LossWeights, Memory,
    StagePredictions,
};
use clockdistill::distill::{
    backbone_feature_distill_loss, build_target_queries, confidence_weights, logit_distill_loss_weighted,
    logit_distill_var, memory_distill_loss, memory_distill_var, stage_pairs, Adapter, DistillConfig,
    FrozenEmbedders,
};
use clockdistill::eval::evaluate_detections;
use clockdistill::geometry::{
    build_multiscale_masks, location_mask, scale_mask, GridShape, GroundTruthInstance, MaskPair,
};
use clockdistill::gradcheck::{check_params, DEFAULT_STEP};
use clockdistill::harness::{
    compute_teacher_targets, query_seed, train_loop, ExperimentConfig,
    ExperimentRunner, MetricsLog, StudentObjective, TeacherTargets, Toggles, TrainConfig,
};
use clockdistill::matching::{hungarian_match, matching_cost};
use clockdistill::nn::ParamStore;
use clockdistill::optim::OptimizerConfig;
use clockdistill::tensor::Tensor;
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[derive(Default)]
struct Shared {
    runner: Option<ExperimentRunner>,
}

impl Shared {
    fn runner(&mut self) -> Result<&mut ExperimentRunner, String> {
        if self.runner.is_none() {
            self.runner = Some(build_runner().map_err(fail)?);
        }
        Ok(self.runner.as_mut().expect("runner was just built"))
    }
}

fn build_runner() -> clockdistill::Result<ExperimentRunner> {
    let cfg = ExperimentConfig::reference();
    let train = cfg.train_data.load()?;
    let val = cfg.val_data.load()?;
    let teacher = reference_teacher(&cfg, &train, &val)?;
    ExperimentRunner::new(cfg, teacher, train, val, MetricsLog::in_memory())
}

// ---------------------------------------------------------------- masks

fn cell_box(n: usize, rows: (usize, usize), cols: (usize, usize)) -> GroundTruthInstance {
    // margins of a tenth of a cell keep exactly the intended centers inside
    let e = 0.1 / n as f64;
    let f = |i: usize| i as f64 / n as f64;
    corner_gt(0, f(cols.0) + e, f(rows.0) + e, f(cols.1) - e, f(rows.1) - e)
}

fn mask_suite(_: &mut Shared) -> Outcome {
    let mut r = rng(100);
    for case in 0..100 {
        let (h, w) = (r.gen_range(1..17), r.gen_range(1..17));
        let gts: Vec<_> = (0..r.gen_range(0..6))
            .map(|_| gt(r.gen_range(0..3), random_box(&mut r, 0.02, 0.9)))
            .collect();
        let shape = GridShape::new(h, w).map_err(fail)?;
        ensure(location_mask(&gts, shape) == brute_location_mask(&gts, h, w), || {
            format!("location mask differs from the rasterizer on case {case}")
        })?;
    }

    let mut sums = 0;
    for case in 0..100 {
        let (h, w) = (r.gen_range(2..13), r.gen_range(2..13));
        let mut gts: Vec<GroundTruthInstance> = Vec::new();
        for _ in 0..200 {
            if gts.len() == 4 {
                break;
            }
            let cand = gt(0, random_box(&mut r, 0.05, 0.6));
            let [a0, b0, a1, b1] = cand.bbox.corners();
            let clear = gts.iter().all(|g| {
                let [x0, y0, x1, y1] = g.bbox.corners();
                a1 < x0 || x1 < a0 || b1 < y0 || y1 < b0
            });
            if clear {
                gts.push(cand);
            }
        }
        let shape = GridShape::new(h, w).map_err(fail)?;
        let m = location_mask(&gts, shape);
        let s = scale_mask(&gts, shape, &m);
        for g in &gts {
            let cells = cells_of(g, h, w);
            if !cells.is_empty() {
                let sum: f64 = cells.iter().map(|&p| s[p]).sum();
                ensure((sum - 1.0).abs() < 1e-9, || format!("case {case}: box weights sum to {sum}"))?;
                sums += 1;
            }
        }
        let bg: f64 = (0..h * w).filter(|&p| !m[p]).map(|p| s[p]).sum();
        if m.iter().any(|&x| !x) {
            ensure((bg - 1.0).abs() < 1e-9, || format!("case {case}: background sums to {bg}"))?;
            sums += 1;
        }
    }

    let mut verified = 0;
    for case in 0.. {
        if verified == 20 {
            break;
        }
        let n = 6 + case % 6;
        let big = (r.gen_range(0..2), r.gen_range(4..=n), r.gen_range(0..2), r.gen_range(4..=n));
        let a = cell_box(n, (big.0, big.1), (big.2, big.3));
        let b = if case % 2 == 0 {
            // nested strictly inside
            cell_box(n, (big.0 + 1, big.1 - 1), (big.2 + 1, big.3 - 1))
        } else {
            // overlaps the lower right corner and extends past it
            cell_box(n, (big.1 - 2, (big.1 + 1).min(n)), (big.3 - 2, n))
        };
        let (ca, cb) = (cells_of(&a, n, n), cells_of(&b, n, n));
        if ca.len() == cb.len() {
            continue;
        }
        let mut gts = vec![a, b];
        gts.shuffle(&mut r);
        let shape = GridShape::new(n, n).map_err(fail)?;
        let s = scale_mask(&gts, shape, &location_mask(&gts, shape));
        let small = ca.len().min(cb.len());
        for p in 0..n * n {
            let (in_a, in_b) = (ca.contains(&p), cb.contains(&p));
            let expected = match (in_a, in_b) {
                (true, true) => 1.0 / small as f64,
                (true, false) => 1.0 / ca.len() as f64,
                (false, true) => 1.0 / cb.len() as f64,
                (false, false) => continue,
            };
            ensure(s[p] == expected, || {
                format!("tie-break case {case}: cell {p} has {} instead of {expected}", s[p])
            })?;
        }
        verified += 1;
    }
    Ok(format!("100 rasterizer cases exact, {sums} weight sums within 1e-9, 20 overlap cases"))
}

// ---------------------------------------------------------------- losses

fn memory(values: Tensor, shape: GridShape) -> Memory {
    Memory {
        positional_encoding: Tensor::zeros(values.rows(), values.cols()),
        values,
        level_shapes: vec![shape],
    }
}

fn loss_algebra(_: &mut Shared) -> Outcome {
    let cfg = DistillConfig::default();
    let id = Adapter::identity(1);
    let ps = ParamStore::new();

    let pair = GridShape::new(1, 2).map_err(fail)?;
    let masks = MaskPair {
        location: vec![true, false],
        scale: vec![1.0, 1.0],
        level_shapes: vec![pair],
    };
    let t = memory(Tensor::from_vec(2, 1, vec![1.0, 0.0]), pair);
    let s = memory(Tensor::from_vec(2, 1, vec![0.0, 1.0]), pair);
    let mem = memory_distill_loss(&t, &s, &masks, cfg.alpha, cfg.beta, &id, &ps).map_err(fail)?;
    let hand = cfg.alpha * 1.0 + cfg.beta * 1.0;
    ensure((mem - 5.01e-5).abs() < 1e-12 && (mem - hand).abs() < 1e-12, || {
        format!("memory micro example gives {mem}")
    })?;

    let one = DistillConfig {
        temperature: 1.0,
        ..DistillConfig::default()
    };
    let preds = |b: [f64; 4]| StagePredictions {
        class_logits: vec![Tensor::from_vec(1, 4, vec![0.3, -1.0, 0.8, 0.1])],
        boxes: vec![Tensor::from_vec(1, 4, b.to_vec())],
    };
    let logit = logit_distill_loss_weighted(
        &preds([0.5, 0.5, 0.2, 0.2]),
        &preds([0.5, 0.5, 0.4, 0.4]),
        &[vec![1.0]],
        &one,
    )
    .map_err(fail)?;
    // L1 = 0.4, GIoU of a box inside one four times its area = 0.25
    let hand = one.lambda_l1 * 0.4 + one.lambda_giou * (1.0 - 0.25);
    ensure((logit - 3.5).abs() < 1e-9 && (logit - hand).abs() < 1e-9, || {
        format!("nested-box logit example gives {logit}")
    })?;

    let mut r = rng(7);
    let shape = GridShape::new(3, 4).map_err(fail)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (p, d) = (12, 3);
        let a = Tensor::from_vec(p, d, (0..p * d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let b = Tensor::from_vec(p, d, (0..p * d).map(|_| r.gen_range(-1.0..1.0)).collect());
        let gts: Vec<_> = (0..r.gen_range(0..3)).map(|_| gt(0, random_box(&mut r, 0.2, 0.7))).collect();
        let m = build_multiscale_masks(&gts, &[shape]);
        let k = r.gen_range(0.1..2.0);
        let got = memory_distill_loss(&memory(a.clone(), shape), &memory(b.clone(), shape), &m, k, k, &id, &ps)
            .map_err(fail)?;
        let mut want = 0.0;
        for i in 0..p {
            let sq: f64 = a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y) * (x - y)).sum();
            want += k * m.scale[i] * sq;
        }
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));

        // unit masks with weight 1/(P D) turn the memory loss into the feature mean
        let unit = MaskPair {
            location: vec![true; p],
            scale: vec![1.0; p],
            level_shapes: vec![shape],
        };
        let w = 1.0 / (p * d) as f64;
        let as_memory = memory_distill_loss(&memory(a.clone(), shape), &memory(b.clone(), shape), &unit, w, w, &id, &ps)
            .map_err(fail)?;
        let feat = |x: Tensor| BackboneFeatures {
            levels: vec![x],
            level_shapes: vec![shape],
        };
        let as_features = backbone_feature_distill_loss(&feat(a), &feat(b), &id, &ps).map_err(fail)?;
        ensure((as_memory - as_features).abs() < 1e-12, || {
            format!("memory form {as_memory} vs feature form {as_features}")
        })?;
    }
    ensure(worst < 1e-12, || format!("equal weights leave a relative gap of {worst:e}"))?;
    Ok(format!("memory example {mem:.3e}, logit example {logit}, reductions within {worst:.1e}"))
}

// ---------------------------------------------------------------- gradients

fn micro_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| Sample {
            id: 1000 + i as u64,
            image: noise_image(8, seed * 100 + i as u64),
            gts: (0..r.gen_range(1..3))
                .map(|_| gt(r.gen_range(0..2), random_box(&mut r, 0.3, 0.8)))
                .collect(),
        })
        .collect()
}

struct MicroSetup {
    student: Detector,
    teacher: Detector,
    objective: StudentObjective,
    distill: DistillConfig,
    samples: Vec<Sample>,
    targets: Vec<TeacherTargets>,
}

fn micro_teacher_config() -> DetectorConfig {
    DetectorConfig {
        embed_dim: 16,
        decoder_layers: 3,
        ..micro_config()
    }
}

fn micro_setup(samples: usize, seed: u64) -> Result<MicroSetup, String> {
    let distill = DistillConfig {
        alpha: 1.0,
        beta: 0.1,
        num_distill_points: 6,
        num_copies: 2,
        ..DistillConfig::default()
    };
    let mut teacher = Detector::new(micro_teacher_config(), seed).map_err(fail)?;
    jitter(&mut teacher, seed + 1, 0.2);
    let mut student = Detector::new(micro_config(), seed + 2).map_err(fail)?;
    let objective = StudentObjective::new(Toggles::FULL, &distill, &mut student, &teacher.config, seed + 3)
        .map_err(fail)?;
    jitter(&mut student, seed + 4, 0.2);
    let samples = micro_samples(samples, seed + 5);
    let targets = compute_teacher_targets(&teacher, &samples, &distill, true, 2).map_err(fail)?;
    Ok(MicroSetup {
        student,
        teacher,
        objective,
        distill,
        samples,
        targets,
    })
}

fn student_extras(m: &MicroSetup) -> Result<Vec<ExtraQueries>, String> {
    let emb = m.objective.embedders.as_ref().ok_or("no embedders")?;
    m.targets
        .iter()
        .map(|t| t.queries.as_ref().ok_or("no query set")?.materialize(emb).map_err(fail))
        .collect()
}

fn gradient_suite(_: &mut Shared) -> Outcome {
    let m = micro_setup(2, 40)?;
    let images: Vec<&Image> = m.samples.iter().map(|s| &s.image).collect();
    let gts: Vec<&[GroundTruthInstance]> = m.samples.iter().map(|s| s.gts.as_slice()).collect();
    let shapes = m.student.config.level_shapes();
    let masks: Vec<MaskPair> = m.samples.iter().map(|s| build_multiscale_masks(&s.gts, &shapes)).collect();
    let t_memory = Tensor::concat_rows(&m.targets.iter().map(|t| &t.memory).collect::<Vec<_>>());
    let adapter = m.objective.adapter.as_ref().ok_or("no adapter")?;
    let extras = student_extras(&m)?;
    let pairs = stage_pairs(m.teacher.num_stages(), m.student.num_stages());
    let inv_b = 1.0 / m.samples.len() as f64;
    let cat = |f: &dyn Fn(&TeacherTargets) -> &Tensor| {
        Tensor::concat_rows(&m.targets.iter().map(f).collect::<Vec<_>>())
    };
    let t_logits: Vec<Tensor> = pairs.iter().map(|&(te, _)| cat(&|t| &t.logits[te])).collect();
    let t_boxes: Vec<Tensor> = pairs.iter().map(|&(te, _)| cat(&|t| &t.boxes[te])).collect();
    let weights: Vec<Vec<f64>> = t_logits
        .iter()
        .map(|l| {
            confidence_weights(l, m.distill.confidence_classes)
                .into_iter()
                .map(|w| w * inv_b)
                .collect()
        })
        .collect();

    let mut store = m.student.params.clone();
    let lcmd = check_params(&mut store, DEFAULT_STEP, |g, ps| {
        let enc = m.student.encode_batch_with(g, ps, &images).unwrap();
        let s = adapter.adapt_memory(g, ps, enc.memory);
        memory_distill_var(g, &t_memory, s, &masks, m.distill.alpha, m.distill.beta).unwrap()
    });
    let tcld = check_params(&mut store, DEFAULT_STEP, |g, ps| {
        let enc = m.student.encode_batch_with(g, ps, &images).unwrap();
        let dec = m.student.decode_batch_with(g, ps, &enc, &extras).unwrap();
        let rows = Arc::new(dec.spans.iter().flat_map(|s| s.extra_rows()).collect::<Vec<_>>());
        let (mut sl, mut sb) = (Vec::new(), Vec::new());
        for &(_, se) in &pairs {
            sl.push(g.gather_rows(dec.stages[se].logits, rows.clone()));
            sb.push(g.gather_rows(dec.stages[se].boxes, rows.clone()));
        }
        logit_distill_var(g, &t_logits, &t_boxes, &sl, &sb, &weights, &m.distill).unwrap()
    });
    let det = check_params(&mut store, DEFAULT_STEP, |g, ps| {
        let enc = m.student.encode_batch_with(g, ps, &images).unwrap();
        let dec = m.student.decode_batch_with(g, ps, &enc, &[]).unwrap();
        detection_loss(g, &m.student.config, &dec, &gts).unwrap().total
    });
    let batch: Vec<&Sample> = m.samples.iter().collect();
    let targets: Vec<&TeacherTargets> = m.targets.iter().collect();
    let total = check_params(&mut store, DEFAULT_STEP, |g, ps| {
        m.objective.loss(g, &m.student, ps, &batch, &targets).unwrap().0
    });

    let named = [("memory", lcmd), ("logit", tcld), ("detection", det), ("total", total)];
    let detail = named
        .iter()
        .map(|(n, r)| format!("{n} {:.1e}", r.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    for (n, r) in named {
        ensure(r.checked > 100 && r.max_rel_err < 1e-3, || {
            format!("{n} gradient off: {r:?}")
        })?;
    }
    Ok(format!("max relative error {detail}; {} parameters each", lcmd.checked))
}

// ---------------------------------------------------------------- consistency

fn bits_equal(a: &FrozenEmbedders, b: &FrozenEmbedders) -> bool {
    let parts = |e: &FrozenEmbedders| {
        [
            e.class_table.clone(),
            e.box_w1.clone(),
            e.box_b1.clone(),
            e.box_w2.clone(),
            e.box_b2.clone(),
            e.random_table.clone(),
        ]
    };
    parts(a).iter().zip(parts(b).iter()).all(|(x, y)| x.bit_eq(y))
}

fn consistency_suite(_: &mut Shared) -> Outcome {
    let mut m = micro_setup(8, 60)?;
    let emb = m.objective.embedders.clone().ok_or("no embedders")?;

    // the student rebuilds each query set exactly as the teacher did
    let tc = TrainConfig {
        epochs: 25,
        batch_size: 2,
        optimizer: OptimizerConfig {
            learning_rate: 1e-3,
            ..OptimizerConfig::default()
        },
    };
    let mut order: Vec<usize> = (0..m.samples.len()).collect();
    let mut r = rng(61);
    let mut steps = 0;
    for _ in 0..2 {
        order.shuffle(&mut r);
        for chunk in order.chunks(tc.batch_size) {
            for &i in chunk {
                let s = &m.samples[i];
                let own = build_target_queries(&s.gts, &emb, &m.distill, query_seed(&m.distill, s.id))
                    .map_err(fail)?;
                let theirs = m.targets[i].queries.as_ref().ok_or("no teacher set")?;
                ensure(own.to_bytes() == theirs.to_bytes(), || format!("image {} query sets differ", s.id))?;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &m.samples[i]).collect();
            let targets: Vec<&TeacherTargets> = chunk.iter().map(|&i| &m.targets[i]).collect();
            let mut g = Graph::new();
            m.objective
                .loss(&mut g, &m.student, &m.student.params, &batch, &targets)
                .map_err(fail)?;
            steps += 1;
        }
    }
    // a set built from another seed is refused
    let mut wrong = m.targets[0].clone();
    wrong.queries = Some(
        build_target_queries(&m.samples[1].gts, &emb, &m.distill, 12345).map_err(fail)?,
    );
    let mut g = Graph::new();
    let refused = m
        .objective
        .loss(&mut g, &m.student, &m.student.params, &[&m.samples[0]], &[&wrong])
        .is_err();
    ensure(refused, || "a foreign query set was accepted".into())?;

    // appending distillation groups leaves the regular queries untouched
    let images: Vec<&Image> = m.samples.iter().map(|s| &s.image).collect();
    let extras: Vec<ExtraQueries> = m
        .targets
        .iter()
        .map(|t| t.queries.as_ref().expect("query set").materialize(&emb))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let mut g = Graph::no_grad();
    let enc = m.student.encode_batch(&mut g, &images).map_err(fail)?;
    let plain = m.student.decode_batch(&mut g, &enc, &[]).map_err(fail)?;
    let mixed = m.student.decode_batch(&mut g, &enc, &extras).map_err(fail)?;
    for b in 0..images.len() {
        let p = plain.predictions(&g, plain.spans[b].regular_rows());
        let q = mixed.predictions(&g, mixed.spans[b].regular_rows());
        for e in 0..p.num_stages() {
            ensure(p.class_logits[e].bit_eq(&q.class_logits[e]) && p.boxes[e].bit_eq(&q.boxes[e]), || {
                format!("image {b} stage {e}: regular outputs moved")
            })?;
        }
    }

    // frozen embedders survive training bit for bit
    let before_student = m.student.params.clone();
    let before_teacher = m.teacher.params.clone();
    let losses = train_loop(
        &mut m.student,
        &m.objective,
        &m.samples,
        &m.targets,
        &tc,
        62,
        &mut MetricsLog::in_memory(),
        "consistency",
        None,
    )
    .map_err(fail)?;
    ensure(losses.len() >= 100, || format!("only {} optimizer steps", losses.len()))?;
    let trained = m.objective.embedders.as_ref().ok_or("no embedders")?;
    let fresh = FrozenEmbedders::new(emb.num_classes(), emb.width(), m.distill.num_distill_points, m.distill.embedder_seed)
        .map_err(fail)?;
    ensure(bits_equal(trained, &emb) && bits_equal(trained, &fresh), || "embedders changed".into())?;
    let moved = before_student
        .ids()
        .any(|id| !before_student.value(id).bit_eq(m.student.params.value(id)));
    ensure(moved, || "training did not change the student".into())?;
    let teacher_same = before_teacher
        .ids()
        .all(|id| before_teacher.value(id).bit_eq(m.teacher.params.value(id)));
    ensure(teacher_same, || "teacher weights changed".into())?;

    // teacher gradient: record the teacher forward on the same tape with
    // every teacher weight trainable, feed its detached outputs to the
    // distillation losses and confirm nothing flows back
    let mut teacher = m.teacher.clone();
    for id in teacher.params.ids().collect::<Vec<_>>() {
        teacher.params.set_trainable(id, true);
    }
    let t_emb = FrozenEmbedders::new(
        teacher.config.num_classes,
        teacher.config.embed_dim,
        m.distill.num_distill_points,
        m.distill.embedder_seed,
    )
    .map_err(fail)?;
    let t_extras: Vec<ExtraQueries> = m
        .targets
        .iter()
        .map(|t| t.queries.as_ref().expect("query set").materialize(&t_emb))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let mut g = Graph::new();
    let t_enc = teacher.encode_batch_with(&mut g, &teacher.params, &images).map_err(fail)?;
    let t_dec = teacher.decode_batch_with(&mut g, &teacher.params, &t_enc, &t_extras).map_err(fail)?;
    let t_mem = g.detach(t_enc.memory);
    let t_mem = g.value(t_mem).clone();
    let t_rows = Arc::new(t_dec.spans.iter().flat_map(|s| s.extra_rows()).collect::<Vec<_>>());
    let s_enc = m.student.encode_batch_with(&mut g, &m.student.params, &images).map_err(fail)?;
    let s_dec = m.student.decode_batch_with(&mut g, &m.student.params, &s_enc, &extras).map_err(fail)?;
    let s_rows = Arc::new(s_dec.spans.iter().flat_map(|s| s.extra_rows()).collect::<Vec<_>>());
    let adapter = m.objective.adapter.as_ref().ok_or("no adapter")?;
    let shapes = m.student.config.level_shapes();
    let masks: Vec<MaskPair> = m.samples.iter().map(|s| build_multiscale_masks(&s.gts, &shapes)).collect();
    let s_mem = adapter.adapt_memory(&mut g, &m.student.params, s_enc.memory);
    let lcmd = memory_distill_var(&mut g, &t_mem, s_mem, &masks, 1.0, 0.1).map_err(fail)?;
    let (mut tl, mut tb, mut sl, mut sb, mut w) = (vec![], vec![], vec![], vec![], vec![]);
    for (te, se) in stage_pairs(teacher.num_stages(), m.student.num_stages()) {
        let l = g.gather_rows(t_dec.stages[te].logits, t_rows.clone());
        let l = g.detach(l);
        let b = g.gather_rows(t_dec.stages[te].boxes, t_rows.clone());
        let b = g.detach(b);
        let l = g.value(l).clone();
        w.push(confidence_weights(&l, m.distill.confidence_classes));
        tl.push(l);
        tb.push(g.value(b).clone());
        sl.push(g.gather_rows(s_dec.stages[se].logits, s_rows.clone()));
        sb.push(g.gather_rows(s_dec.stages[se].boxes, s_rows.clone()));
    }
    let tcld = logit_distill_var(&mut g, &tl, &tb, &sl, &sb, &w, &m.distill).map_err(fail)?;
    let root = g.add(lcmd, tcld);
    let grads = g.backward(root);
    let teacher_grads = g.param_grads(&grads, &teacher.params);
    let nonzero: usize = teacher_grads
        .iter()
        .flatten()
        .map(|t| t.data().iter().filter(|&&v| v != 0.0).count())
        .sum();
    ensure(nonzero == 0, || format!("{nonzero} teacher gradient entries are nonzero"))?;
    let student_grads = g.param_grads(&grads, &m.student.params);
    let student_norm: f64 = student_grads.iter().flatten().map(Tensor::sq_norm).sum();
    ensure(student_norm > 0.0, || "student received no gradient".into())?;

    Ok(format!(
        "{steps} steps with identical query sets, regular outputs bit-equal, \
         embedders bit-stable over {} steps, teacher gradient exactly 0",
        losses.len()
    ))
}

// ---------------------------------------------------------------- oracles

fn matching_and_ap(_: &mut Shared) -> Outcome {
    let mut r = rng(200);
    let mut max_gts = 0;
    for case in 0..50 {
        let c = matching_case(&mut r);
        max_gts = max_gts.max(c.classes.len());
        let w = LossWeights::default();
        let cost = matching_cost(&c.probs, &c.boxes, &c.classes, &c.gt_boxes, w).map_err(fail)?;
        let m = hungarian_match(&c.probs, &c.boxes, &c.classes, &c.gt_boxes, w).map_err(fail)?;
        let cols = c.probs.len();
        let got: f64 = m.iter().map(|&(q, g)| cost[g * cols + q]).sum();
        let best = brute_force_assignment(&cost, c.classes.len(), cols);
        ensure((got - best).abs() < 1e-9, || format!("case {case}: matching cost {got} vs optimum {best}"))?;
    }
    let mut max_gap: f64 = 0.0;
    for case in 0..20 {
        let (preds, gts) = ap_case(&mut r);
        let got = evaluate_detections(&preds, &gts, 2, 64).ap;
        let want = naive_ap(&preds, &gts, 2);
        max_gap = max_gap.max((got - want).abs());
        ensure((got - want).abs() < 1e-12, || format!("case {case}: AP {got} vs reference {want}"))?;
    }
    Ok(format!("50 matchings optimal (up to {max_gts} ground truths), 20 AP cases within {max_gap:.1e}"))
}

// ---------------------------------------------------------------- experiments

fn components(shared: &mut Shared) -> Outcome {
    let runner = shared.runner()?;
    let report = runner.ablate_components().map_err(fail)?;
    eprint!("{}", report.to_table());
    let mean = |t: Toggles| report.row(t).map(|r| r.mean_ap).ok_or(format!("missing row {}", t.label()));
    let [b, m, ml, full] = [
        mean(Toggles::BASELINE)?,
        mean(Toggles::MEM)?,
        mean(Toggles::MEM_LM)?,
        mean(Toggles::FULL)?,
    ];
    let gain = 100.0 * (full - b);
    let detail = format!(
        "AP baseline {:.2}, Mem {:.2}, Mem+LM {:.2}, Mem+LM+TQ {:.2}; gain {gain:+.2} points",
        100.0 * b,
        100.0 * m,
        100.0 * ml,
        100.0 * full
    );
    ensure(b < m && m <= ml && ml <= full, || format!("ordering violated: {detail}"))?;
    ensure(gain >= 2.0, || format!("gain below 2 points: {detail}"))?;
    Ok(detail)
}

fn layers(shared: &mut Shared) -> Outcome {
    let runner = shared.runner()?;
    let report = runner.ablate_layers().map_err(fail)?;
    eprint!("{}", report.to_table());
    let detail = report
        .cells
        .iter()
        .map(|c| {
            format!(
                "({},{}) {:.2}->{:.2}",
                c.encoder_layers,
                c.decoder_layers,
                100.0 * c.baseline_mean_ap,
                100.0 * c.distilled_mean_ap
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    for c in &report.cells {
        ensure(c.distilled_mean_ap > c.baseline_mean_ap, || {
            format!("cell ({},{}) not improved: {detail}", c.encoder_layers, c.decoder_layers)
        })?;
    }
    Ok(format!("{} runs; {detail}", report.num_runs()))
}

fn attention(shared: &mut Shared) -> Outcome {
    let runner = shared.runner()?;
    let cmp = runner.attention_comparison().map_err(fail)?;
    let detail = format!(
        "mass inside boxes over {} images: baseline {:.4}, distilled {:.4}",
        cmp.num_images, cmp.baseline_mean, cmp.distilled_mean
    );
    ensure(cmp.distilled_mean > cmp.baseline_mean, || format!("not higher: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- driver

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn(&mut Shared) -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "mask oracles",
            budget: Some(Duration::from_secs(10)),
            run: mask_suite,
        },
        Criterion {
            name: "loss algebra",
            budget: Some(Duration::from_secs(10)),
            run: loss_algebra,
        },
        Criterion {
            name: "gradients",
            budget: Some(Duration::from_secs(120)),
            run: gradient_suite,
        },
        Criterion {
            name: "consistency and isolation",
            budget: Some(Duration::from_secs(120)),
            run: consistency_suite,
        },
        Criterion {
            name: "hungarian and AP oracles",
            budget: Some(Duration::from_secs(60)),
            run: matching_and_ap,
        },
        Criterion {
            name: "component ablation",
            budget: None,
            run: components,
        },
        Criterion {
            name: "layer ablation",
            budget: None,
            run: layers,
        },
        Criterion {
            name: "attention inside boxes",
            budget: None,
            run: attention,
        },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !only.is_empty() && !only.iter().any(|o| c.name.contains(o.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(d), Some(b)) if elapsed > b => Err(format!("{d}; took {elapsed:.1?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(d) => println!("PASS  {:<28} {d} [{elapsed:.1?}]", c.name),
            Err(e) => {
                failed += 1;
                println!("FAIL  {:<28} {e} [{elapsed:.1?}]", c.name);
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
