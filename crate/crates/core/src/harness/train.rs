use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig, Stream, Toggles, TrainConfig};
use super::metrics::{MetricsLog, StepRecord};
use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Image, Sample};
use crate::detector::{
    detection_loss, DecodedBatch, Detector, DetectorConfig, EncodedBatch, ExtraQueries,
};
use crate::distill::{
    backbone_distill_var, build_target_queries, confidence_weights, ensure_same_query_set,
    logit_distill_var, memory_distill_var, stage_pairs, Adapter, DistillConfig, FrozenEmbedders,
    TargetAwareQuerySet,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, EvalReport};
use crate::geometry::{build_multiscale_masks_with, GroundTruthInstance, MaskPair};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::Tensor;

use super::config::EvalConfig;

/// Query-set seed of one image; independent of the experiment seed so
/// cached teacher outputs serve every student run.
pub fn query_seed(distill: &DistillConfig, image_id: u64) -> u64 {
    derive_seed(derive_seed(distill.embedder_seed, Stream::Queries as u64), image_id)
}

/// Frozen teacher outputs for one training image.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    /// Encoder memory, `P x D_t`.
    pub memory: Tensor,
    /// Backbone maps per level.
    pub features: Vec<Tensor>,
    pub queries: Option<TargetAwareQuerySet>,
    /// Per teacher stage, predictions of the distillation queries.
    pub logits: Vec<Tensor>,
    pub boxes: Vec<Tensor>,
}

fn memory_masks(
    gts: &[&[GroundTruthInstance]],
    config: &DetectorConfig,
    distill: &DistillConfig,
    location_mask: bool,
) -> Vec<MaskPair> {
    let shapes = config.level_shapes();
    gts.iter()
        .map(|g| {
            if location_mask {
                build_multiscale_masks_with(g, &shapes, distill.membership)
            } else {
                MaskPair::uniform(&shapes)
            }
        })
        .collect()
}

/// Encoding whose memory is multiplied by the location mask.
fn masked_encoding(g: &mut Graph, enc: &EncodedBatch, masks: &[MaskPair]) -> EncodedBatch {
    let d = g.value(enc.memory).cols();
    let data = masks
        .iter()
        .flat_map(|m| m.location.iter())
        .flat_map(|&inside| std::iter::repeat(if inside { 1.0 } else { 0.0 }).take(d))
        .collect();
    let rows = masks.iter().map(MaskPair::len).sum();
    let m = g.constant(Tensor::from_vec(rows, d, data));
    EncodedBatch {
        batch: enc.batch,
        features: enc.features.clone(),
        memory: g.mul(enc.memory, m),
        pos: enc.pos,
        attention: enc.attention.clone(),
    }
}

/// Decodes regular plus distillation queries. With masked decoder memory
/// the distillation queries run in a second pass over masked memory,
/// returned as the second element.
fn decode_with_queries(
    g: &mut Graph,
    det: &Detector,
    ps: &ParamStore,
    enc: &EncodedBatch,
    extras: &[ExtraQueries],
    masked: Option<&[MaskPair]>,
) -> Result<(DecodedBatch, Option<DecodedBatch>)> {
    match masked {
        None => Ok((det.decode_batch_with(g, ps, enc, extras)?, None)),
        Some(masks) => {
            let plain = det.decode_batch_with(g, ps, enc, &[])?;
            let menc = masked_encoding(g, enc, masks);
            let distill = det.decode_batch_with(g, ps, &menc, extras)?;
            Ok((plain, Some(distill)))
        }
    }
}

/// Runs the frozen teacher over `samples` once. Query sets and their
/// predictions are produced only when `with_queries` is set.
pub fn compute_teacher_targets(
    teacher: &Detector,
    samples: &[Sample],
    distill: &DistillConfig,
    with_queries: bool,
    batch_size: usize,
) -> Result<Vec<TeacherTargets>> {
    let tc = &teacher.config;
    let emb = if with_queries {
        Some(FrozenEmbedders::new(
            tc.num_classes,
            tc.embed_dim,
            distill.num_distill_points,
            distill.embedder_seed,
        )?)
    } else {
        None
    };
    let p = tc.tokens_per_image();
    let cells: Vec<usize> = tc.level_shapes().iter().map(|s| s.cells()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut g = Graph::no_grad();
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let enc = teacher.encode_batch(&mut g, &images)?;
        let mut per_image: Vec<TeacherTargets> = (0..chunk.len())
            .map(|b| TeacherTargets {
                memory: g.value(enc.memory).slice_rows(b * p, (b + 1) * p),
                features: enc
                    .features
                    .iter()
                    .zip(&cells)
                    .map(|(&f, &c)| g.value(f).slice_rows(b * c, (b + 1) * c))
                    .collect(),
                queries: None,
                logits: Vec::new(),
                boxes: Vec::new(),
            })
            .collect();
        if let Some(emb) = &emb {
            let sets = chunk
                .iter()
                .map(|s| build_target_queries(&s.gts, emb, distill, query_seed(distill, s.id)))
                .collect::<Result<Vec<_>>>()?;
            let extras = sets
                .iter()
                .map(|s| s.materialize(emb))
                .collect::<Result<Vec<_>>>()?;
            let gts: Vec<&[GroundTruthInstance]> = chunk.iter().map(|s| s.gts.as_slice()).collect();
            let masks = distill
                .mask_decoder_memory
                .then(|| memory_masks(&gts, tc, distill, true));
            let (plain, masked) =
                decode_with_queries(&mut g, teacher, &teacher.params, &enc, &extras, masks.as_deref())?;
            let dec = masked.unwrap_or(plain);
            for ((t, set), span) in per_image.iter_mut().zip(sets).zip(&dec.spans) {
                let preds = dec.predictions(&g, span.extra_rows());
                t.queries = Some(set);
                t.logits = preds.class_logits;
                t.boxes = preds.boxes;
            }
        }
        out.extend(per_image);
    }
    Ok(out)
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub det: f64,
    pub lcmd: f64,
    pub tcld: f64,
}

/// The student's training objective: detection loss plus the enabled
/// distillation terms against cached teacher outputs.
#[derive(Debug, Clone)]
pub struct StudentObjective {
    pub toggles: Toggles,
    pub distill: DistillConfig,
    pub adapter: Option<Adapter>,
    pub embedders: Option<FrozenEmbedders>,
    pub teacher_stages: usize,
}

impl StudentObjective {
    /// Plain detection training.
    pub fn detection_only() -> Self {
        StudentObjective {
            toggles: Toggles::BASELINE,
            distill: DistillConfig::default(),
            adapter: None,
            embedders: None,
            teacher_stages: 0,
        }
    }

    /// Registers adapters in the student's store when memory or feature
    /// distillation is on.
    pub fn new(
        toggles: Toggles,
        distill: &DistillConfig,
        student: &mut Detector,
        teacher: &DetectorConfig,
        adapter_seed: u64,
    ) -> Result<Self> {
        if toggles.any() && student.config.level_shapes() != teacher.level_shapes() {
            return Err(Error::Config(format!(
                "student levels {:?} do not match teacher levels {:?}",
                student.config.level_shapes(),
                teacher.level_shapes()
            )));
        }
        let adapter = if toggles.memory_distill {
            let scfg = student.config.clone();
            Some(Adapter::new(&mut student.params, adapter_seed, &scfg, teacher)?)
        } else {
            None
        };
        let embedders = if toggles.target_queries {
            Some(FrozenEmbedders::new(
                student.config.num_classes,
                student.config.embed_dim,
                distill.num_distill_points,
                distill.embedder_seed,
            )?)
        } else {
            None
        };
        Ok(StudentObjective {
            toggles,
            distill: distill.clone(),
            adapter,
            embedders,
            teacher_stages: teacher.decoder_layers,
        })
    }

    /// Builds the loss of one batch. `targets[b]` belongs to `batch[b]`
    /// and may be empty when no distillation term is on.
    pub fn loss(
        &self,
        g: &mut Graph,
        student: &Detector,
        ps: &ParamStore,
        batch: &[&Sample],
        targets: &[&TeacherTargets],
    ) -> Result<(Var, StepLosses)> {
        let cfg = &self.distill;
        if self.toggles.any() && targets.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} teacher targets for a batch of {}",
                targets.len(),
                batch.len()
            )));
        }
        let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let gts: Vec<&[GroundTruthInstance]> = batch.iter().map(|s| s.gts.as_slice()).collect();
        let enc = student.encode_batch_with(g, ps, &images)?;

        let mut sets = Vec::new();
        let extras = match &self.embedders {
            Some(emb) => {
                for (s, t) in batch.iter().zip(targets) {
                    let own = build_target_queries(&s.gts, emb, cfg, query_seed(cfg, s.id))?;
                    let theirs = t.queries.as_ref().ok_or_else(|| {
                        Error::QuerySetMismatch(format!("no teacher query set for image {}", s.id))
                    })?;
                    ensure_same_query_set(theirs, &own)?;
                    sets.push(own);
                }
                sets.iter()
                    .map(|s| s.materialize(emb))
                    .collect::<Result<Vec<_>>>()?
            }
            None => Vec::new(),
        };
        let masked = (cfg.mask_decoder_memory && !extras.is_empty())
            .then(|| memory_masks(&gts, &student.config, cfg, true));
        let (dec, masked_dec) = decode_with_queries(g, student, ps, &enc, &extras, masked.as_deref())?;
        let dist_dec = masked_dec.as_ref().unwrap_or(&dec);
        let det = detection_loss(g, &student.config, &dec, &gts)?;
        let mut terms = vec![det.total];
        let mut losses = StepLosses {
            det: g.value(det.total).item(),
            ..StepLosses::default()
        };

        if let Some(adapter) = &self.adapter {
            let mut parts = Vec::new();
            if cfg.recipe.uses_memory() {
                let t = Tensor::concat_rows(&targets.iter().map(|t| &t.memory).collect::<Vec<_>>());
                let s = adapter.adapt_memory(g, ps, enc.memory);
                let masks = memory_masks(&gts, &student.config, cfg, self.toggles.location_mask);
                parts.push(memory_distill_var(g, &t, s, &masks, cfg.alpha, cfg.beta)?);
            }
            if cfg.recipe.uses_backbone() {
                let levels = enc.features.len();
                let t: Vec<Tensor> = (0..levels)
                    .map(|l| Tensor::concat_rows(&targets.iter().map(|t| &t.features[l]).collect::<Vec<_>>()))
                    .collect();
                let s: Vec<Var> = (0..levels)
                    .map(|l| adapter.adapt_feature(g, ps, l, enc.features[l]))
                    .collect();
                let l = backbone_distill_var(g, &t, &s)?;
                parts.push(g.scale(l, cfg.backbone_weight));
            }
            let lcmd = g.add_all(&parts);
            losses.lcmd = g.value(lcmd).item();
            terms.push(lcmd);
        }

        if self.embedders.is_some() {
            let rows: Vec<usize> = dist_dec.spans.iter().flat_map(|s| s.extra_rows()).collect();
            let rows = Arc::new(rows);
            let pairs = stage_pairs(self.teacher_stages, dist_dec.stages.len());
            let inv_b = 1.0 / batch.len() as f64;
            let (mut tl, mut tb, mut sl, mut sb, mut w) = (vec![], vec![], vec![], vec![], vec![]);
            for (te, se) in pairs {
                let logits = Tensor::concat_rows(&targets.iter().map(|t| &t.logits[te]).collect::<Vec<_>>());
                let boxes = Tensor::concat_rows(&targets.iter().map(|t| &t.boxes[te]).collect::<Vec<_>>());
                w.push(
                    confidence_weights(&logits, cfg.confidence_classes)
                        .into_iter()
                        .map(|v| v * inv_b)
                        .collect(),
                );
                tl.push(logits);
                tb.push(boxes);
                let st = dist_dec.stages[se];
                sl.push(g.gather_rows(st.logits, rows.clone()));
                sb.push(g.gather_rows(st.boxes, rows.clone()));
            }
            let tcld = logit_distill_var(g, &tl, &tb, &sl, &sb, &w, cfg)?;
            losses.tcld = g.value(tcld).item();
            terms.push(tcld);
        }

        let total = g.add_all(&terms);
        losses.total = crate::distill::total_loss(losses.lcmd, losses.tcld, losses.det)?;
        Ok((total, losses))
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub detector: Detector,
    pub report: EvalReport,
    pub steps: u64,
    pub init_seed: u64,
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_detector(
            &self.detector,
            self.init_seed,
            self.steps,
            serde_json::to_value(&self.report)?,
        )
    }
}

/// Shuffled mini-batch training loop shared by teacher and student.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    det: &mut Detector,
    objective: &StudentObjective,
    train: &[Sample],
    targets: &[TeacherTargets],
    tc: &TrainConfig,
    shuffle_seed: u64,
    log: &mut MetricsLog,
    run: &str,
    failure_dir: Option<&Path>,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut opt = AdamW::new(tc.optimizer.clone());
    let per_epoch = tc.steps_per_epoch(train.len());
    let total = tc.epochs * per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let tgt: Vec<&TeacherTargets> = if targets.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| &targets[i]).collect()
            };
            let mut g = Graph::new();
            let (root, l) = match objective.loss(&mut g, det, &det.params, &batch, &tgt) {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = failure_dir {
                        let path = dir.join(format!("{run}.last_good.ckpt"));
                        Checkpoint::from_detector(det, 0, step as u64, serde_json::Value::Null)?
                            .save(&path)?;
                        log::error!("{run}: {e} at step {step}; last good weights in {}", path.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let grads = g.backward(root);
            let mut pg = g.param_grads(&grads, &det.params);
            let lr = tc.optimizer.lr_at(step, total);
            let grad_norm = opt.step(&mut det.params, &mut pg, lr);
            log.record(StepRecord {
                run: run.to_string(),
                epoch,
                step,
                lr,
                loss: l.total,
                det: l.det,
                lcmd: l.lcmd,
                tcld: l.tcld,
                grad_norm,
            })?;
            losses.push(l.total);
            step += 1;
        }
    }
    Ok(losses)
}

/// COCO-style evaluation of `det` on `samples`.
pub fn evaluate(det: &Detector, samples: &[Sample], eval: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let start = std::time::Instant::now();
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval.batch_size.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        preds.extend(det.predict_batch(&images, eval.top_k, eval.score_threshold)?);
    }
    let gts: Vec<Vec<GroundTruthInstance>> = samples.iter().map(|s| s.gts.clone()).collect();
    let mut report =
        evaluate_detections(&preds, &gts, det.config.num_classes, det.config.image_size);
    report.eval_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Trains the teacher with the detection loss only.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    train: &[Sample],
    val: &[Sample],
    log: &mut MetricsLog,
    failure_dir: Option<&Path>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let init_seed = cfg.stream_seed(Stream::TeacherInit);
    let mut det = Detector::new(cfg.teacher.clone(), init_seed)?;
    let objective = StudentObjective::detection_only();
    let losses = train_loop(
        &mut det,
        &objective,
        train,
        &[],
        &cfg.teacher_training,
        cfg.stream_seed(Stream::Shuffle),
        log,
        "teacher",
        failure_dir,
    )?;
    let report = evaluate(&det, val, &cfg.eval)?;
    Ok(TrainedModel {
        steps: losses.len() as u64,
        detector: det,
        report,
        init_seed,
        losses,
    })
}

/// Trains a student with `cfg.toggles`. `targets` must come from
/// [`compute_teacher_targets`] over `train` with queries whenever target
/// queries are on; it may be empty when every toggle is off.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    cfg: &ExperimentConfig,
    teacher: &DetectorConfig,
    targets: &[TeacherTargets],
    train: &[Sample],
    val: &[Sample],
    log: &mut MetricsLog,
    run: &str,
    failure_dir: Option<&Path>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if cfg.toggles.any() && targets.len() != train.len() {
        return Err(Error::Config(format!(
            "{} teacher targets for {} training images",
            targets.len(),
            train.len()
        )));
    }
    if cfg.toggles.target_queries && targets.iter().any(|t| t.queries.is_none()) {
        return Err(Error::Config("teacher targets lack query sets".into()));
    }
    let init_seed = cfg.stream_seed(Stream::StudentInit);
    let mut det = Detector::new(cfg.student.clone(), init_seed)?;
    let objective = StudentObjective::new(
        cfg.toggles,
        &cfg.distill,
        &mut det,
        teacher,
        cfg.stream_seed(Stream::Adapter),
    )?;
    let losses = train_loop(
        &mut det,
        &objective,
        train,
        if cfg.toggles.any() { targets } else { &[] },
        &cfg.student_training,
        cfg.stream_seed(Stream::Shuffle),
        log,
        run,
        failure_dir,
    )?;
    let report = evaluate(&det, val, &cfg.eval)?;
    Ok(TrainedModel {
        steps: losses.len() as u64,
        detector: det,
        report,
        init_seed,
        losses,
    })
}
