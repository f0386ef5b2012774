use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ConfidenceClasses, DistillConfig};
use crate::autograd::{softmax_rows, Graph, Var};
use crate::detector::{BackboneFeatures, DetectorConfig, Memory, StagePredictions};
use crate::error::{Error, Result};
use crate::geometry::MaskPair;
use crate::nn::{Linear, ParamStore};
use crate::tensor::Tensor;

/// Learned maps from student to teacher widths. A map is absent when the
/// widths already agree.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub memory: Option<Linear>,
    pub features: Vec<Option<Linear>>,
}

impl Adapter {
    /// Registers the needed maps in the student's parameter store.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        student: &DetectorConfig,
        teacher: &DetectorConfig,
    ) -> Result<Adapter> {
        if student.level_shapes() != teacher.level_shapes() {
            return Err(Error::Config(format!(
                "student levels {:?} do not match teacher levels {:?}",
                student.level_shapes(),
                teacher.level_shapes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memory = (student.embed_dim != teacher.embed_dim).then(|| {
            Linear::new(store, &mut rng, "adapter.memory", student.embed_dim, teacher.embed_dim)
        });
        let features = (0..student.level_strides.len())
            .map(|l| {
                (student.backbone_channels != teacher.backbone_channels).then(|| {
                    Linear::new(
                        store,
                        &mut rng,
                        &format!("adapter.feature{l}"),
                        student.backbone_channels,
                        teacher.backbone_channels,
                    )
                })
            })
            .collect();
        Ok(Adapter { memory, features })
    }

    /// Adapter for models of equal widths.
    pub fn identity(levels: usize) -> Adapter {
        Adapter {
            memory: None,
            features: vec![None; levels],
        }
    }

    pub fn adapt_memory(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        match &self.memory {
            Some(l) => l.forward(g, ps, x),
            None => x,
        }
    }

    pub fn adapt_feature(&self, g: &mut Graph, ps: &ParamStore, level: usize, x: Var) -> Var {
        match self.features.get(level).and_then(Option::as_ref) {
            Some(l) => l.forward(g, ps, x),
            None => x,
        }
    }
}

/// Mean squared error per level, averaged over levels.
/// `student` must already be adapted to the teacher's width.
pub fn backbone_distill_var(g: &mut Graph, teacher: &[Tensor], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Shape(format!(
            "{} teacher levels vs {} student levels",
            teacher.len(),
            student.len()
        )));
    }
    let mut terms = Vec::with_capacity(teacher.len());
    for (t, &s) in teacher.iter().zip(student) {
        if g.value(s).shape() != t.shape() {
            return Err(Error::Shape(format!(
                "feature map {:?} vs {:?}",
                g.value(s).shape(),
                t.shape()
            )));
        }
        let w = 1.0 / t.len() as f64;
        let l = g.weighted_sq_err(s, t.clone(), vec![w; t.rows()]);
        terms.push(l);
    }
    let sum = g.add_all(&terms);
    Ok(g.scale(sum, 1.0 / teacher.len() as f64))
}

/// Location-and-scale weighted memory loss
/// `sum_p w_p sum_d (A^T - A^S)^2` with `w_p = alpha*M*S + beta*(1-M)*S`,
/// averaged over the images of the batch. `masks[b]` covers image `b`.
pub fn memory_distill_var(
    g: &mut Graph,
    teacher: &Tensor,
    student: Var,
    masks: &[MaskPair],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let rows: usize = masks.iter().map(MaskPair::len).sum();
    if g.value(student).shape() != teacher.shape() || rows != teacher.rows() {
        return Err(Error::Shape(format!(
            "memory {:?} vs {:?} with {rows} mask points",
            g.value(student).shape(),
            teacher.shape()
        )));
    }
    let inv_b = 1.0 / masks.len().max(1) as f64;
    let weights: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.point_weights(alpha, beta))
        .map(|w| w * inv_b)
        .collect();
    Ok(g.weighted_sq_err(student, teacher.clone(), weights))
}

/// Teacher confidence per query: the largest softmax probability.
pub fn confidence_weights(teacher_logits: &Tensor, classes: ConfidenceClasses) -> Vec<f64> {
    let probs = softmax_rows(teacher_logits, 1.0);
    let fg = teacher_logits.cols() - 1;
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let row = match classes {
                ConfidenceClasses::All => row,
                ConfidenceClasses::ForegroundOnly => &row[..fg],
            };
            row.iter().fold(0.0f64, |m, &v| m.max(v))
        })
        .collect()
}

/// Stage pairs `(teacher, student)` entering the logit loss: all stages when
/// the depths agree, otherwise only the two final stages.
pub fn stage_pairs(teacher_stages: usize, student_stages: usize) -> Vec<(usize, usize)> {
    if teacher_stages == student_stages {
        (0..teacher_stages).map(|e| (e, e)).collect()
    } else if teacher_stages == 0 || student_stages == 0 {
        Vec::new()
    } else {
        vec![(teacher_stages - 1, student_stages - 1)]
    }
}

/// Logit loss over already paired stages with explicit per-query weights:
/// `sum_e sum_g w * [cls * KL * T^2 + l1 * L1 + giou * (1 - GIoU)]`.
pub fn logit_distill_var(
    g: &mut Graph,
    teacher_logits: &[Tensor],
    teacher_boxes: &[Tensor],
    student_logits: &[Var],
    student_boxes: &[Var],
    weights: &[Vec<f64>],
    cfg: &DistillConfig,
) -> Result<Var> {
    let e = teacher_logits.len();
    if [teacher_boxes.len(), student_logits.len(), student_boxes.len(), weights.len()]
        .iter()
        .any(|&n| n != e)
    {
        return Err(Error::Shape("stage counts of logit distillation inputs differ".into()));
    }
    let t = cfg.temperature;
    let kl_scale = if cfg.kl_temperature_squared { 1.0 } else { 1.0 / (t * t) };
    let mut terms = Vec::new();
    for s in 0..e {
        let (tl, tb) = (&teacher_logits[s], &teacher_boxes[s]);
        if g.value(student_logits[s]).shape() != tl.shape()
            || g.value(student_boxes[s]).shape() != tb.shape()
            || weights[s].len() != tl.rows()
        {
            return Err(Error::QuerySetMismatch(format!(
                "teacher has {} distillation rows, student {}",
                tl.rows(),
                g.value(student_logits[s]).rows()
            )));
        }
        if tl.rows() == 0 {
            continue;
        }
        let w = &weights[s];
        if cfg.lambda_cls > 0.0 {
            let kw = w.iter().map(|v| v * cfg.lambda_cls * kl_scale).collect();
            terms.push(g.kl_div(student_logits[s], tl, t, kw));
        }
        if cfg.lambda_l1 > 0.0 {
            let lw = w.iter().map(|v| v * cfg.lambda_l1).collect();
            terms.push(g.l1_rows(student_boxes[s], tb.clone(), lw));
        }
        if cfg.lambda_giou > 0.0 {
            let gw = w.iter().map(|v| v * cfg.lambda_giou).collect();
            terms.push(g.giou_rows(student_boxes[s], tb.clone(), gw));
        }
    }
    Ok(g.add_all(&terms))
}

/// Eq. 1 on materialized features of one image.
pub fn backbone_feature_distill_loss(
    teacher: &BackboneFeatures,
    student: &BackboneFeatures,
    adapter: &Adapter,
    params: &ParamStore,
) -> Result<f64> {
    let mut g = Graph::no_grad();
    let student: Vec<Var> = student
        .levels
        .iter()
        .enumerate()
        .map(|(l, f)| {
            let x = g.constant(f.clone());
            adapter.adapt_feature(&mut g, params, l, x)
        })
        .collect();
    let loss = backbone_distill_var(&mut g, &teacher.levels, &student)?;
    Ok(g.value(loss).item())
}

/// Memory loss on materialized memories of one image.
pub fn memory_distill_loss(
    teacher: &Memory,
    student: &Memory,
    masks: &MaskPair,
    alpha: f64,
    beta: f64,
    adapter: &Adapter,
    params: &ParamStore,
) -> Result<f64> {
    if masks.level_shapes != teacher.level_shapes || masks.level_shapes != student.level_shapes {
        return Err(Error::Shape("masks and memories use different levels".into()));
    }
    let mut g = Graph::no_grad();
    let s = g.constant(student.values.clone());
    let s = adapter.adapt_memory(&mut g, params, s);
    let loss = memory_distill_var(&mut g, &teacher.values, s, std::slice::from_ref(masks), alpha, beta)?;
    Ok(g.value(loss).item())
}

/// Logit loss with explicit weights per paired stage.
pub fn logit_distill_loss_weighted(
    teacher: &StagePredictions,
    student: &StagePredictions,
    weights: &[Vec<f64>],
    cfg: &DistillConfig,
) -> Result<f64> {
    let pairs = stage_pairs(teacher.num_stages(), student.num_stages());
    let mut g = Graph::no_grad();
    let sl: Vec<Var> = pairs
        .iter()
        .map(|&(_, s)| g.constant(student.class_logits[s].clone()))
        .collect();
    let sb: Vec<Var> = pairs
        .iter()
        .map(|&(_, s)| g.constant(student.boxes[s].clone()))
        .collect();
    let tl: Vec<Tensor> = pairs.iter().map(|&(t, _)| teacher.class_logits[t].clone()).collect();
    let tb: Vec<Tensor> = pairs.iter().map(|&(t, _)| teacher.boxes[t].clone()).collect();
    let loss = logit_distill_var(&mut g, &tl, &tb, &sl, &sb, weights, cfg)?;
    Ok(g.value(loss).item())
}

/// Confidence-weighted logit loss over the distillation queries of one image.
pub fn logit_distill_loss(
    teacher: &StagePredictions,
    student: &StagePredictions,
    cfg: &DistillConfig,
) -> Result<f64> {
    let weights: Vec<Vec<f64>> = stage_pairs(teacher.num_stages(), student.num_stages())
        .iter()
        .map(|&(t, _)| confidence_weights(&teacher.class_logits[t], cfg.confidence_classes))
        .collect();
    logit_distill_loss_weighted(teacher, student, &weights, cfg)
}

/// Unweighted sum of the three student losses; refuses non-finite terms.
pub fn total_loss(l_lcmd: f64, l_tcld: f64, l_det: f64) -> Result<f64> {
    for (name, v) in [("memory", l_lcmd), ("logit", l_tcld), ("detection", l_det)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    Ok(l_lcmd + l_tcld + l_det)
}
