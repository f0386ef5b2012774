use std::sync::Arc;

use super::{DecodedBatch, DetectorConfig};
use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::GroundTruthInstance;
use crate::matching::hungarian_match;
use crate::tensor::Tensor;

/// Set-prediction loss with its per-term values (summed over stages).
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Hungarian-matched DETR loss over every decoder stage:
/// weighted-mean cross-entropy over the regular queries (unmatched ones
/// target background) plus L1 and `1 - GIoU` over matched pairs, both
/// normalized by the number of ground truths in the batch.
///
/// Extra (distillation) queries are ignored.
pub fn detection_loss(
    g: &mut Graph,
    config: &DetectorConfig,
    decoded: &DecodedBatch,
    gts: &[&[GroundTruthInstance]],
) -> Result<DetectionLoss> {
    if gts.len() != decoded.spans.len() {
        return Err(Error::Shape(format!(
            "{} annotation lists for a batch of {}",
            gts.len(),
            decoded.spans.len()
        )));
    }
    let w = config.loss_weights;
    let bg = config.num_classes;
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    let norm = 1.0 / n_gt.max(1) as f64;
    let regular_idx: Vec<usize> = decoded.spans.iter().flat_map(|s| s.regular_rows()).collect();
    let regular_idx = Arc::new(regular_idx);

    let mut terms = Vec::new();
    let (mut cls_sum, mut l1_sum, mut giou_sum) = (0.0, 0.0, 0.0);
    for stage in &decoded.stages {
        let mut targets = Vec::with_capacity(regular_idx.len());
        let mut weights = Vec::with_capacity(regular_idx.len());
        let mut matched_rows = Vec::with_capacity(n_gt);
        let mut matched_boxes = Vec::with_capacity(n_gt * 4);
        {
            let logits = g.value(stage.logits);
            let boxes = g.value(stage.boxes);
            for (span, img_gts) in decoded.spans.iter().zip(gts) {
                let rows = span.regular_rows();
                let probs = softmax_rows(&logits.slice_rows(rows.start, rows.end), 1.0);
                let prob_rows: Vec<Vec<f64>> =
                    (0..probs.rows()).map(|r| probs.row(r).to_vec()).collect();
                let pred_boxes: Vec<[f64; 4]> = rows
                    .clone()
                    .map(|r| boxes.row(r).try_into().expect("4 box coordinates"))
                    .collect();
                let classes: Vec<usize> = img_gts.iter().map(|t| t.class_id).collect();
                let gt_boxes: Vec<[f64; 4]> = img_gts.iter().map(|t| t.bbox.to_array()).collect();
                let pairs = hungarian_match(&prob_rows, &pred_boxes, &classes, &gt_boxes, w)?;
                let base = targets.len();
                targets.extend(std::iter::repeat(bg).take(span.regular));
                weights.extend(std::iter::repeat(config.no_object_weight).take(span.regular));
                for (q, t) in pairs {
                    targets[base + q] = classes[t];
                    weights[base + q] = 1.0;
                    matched_rows.push(span.start + q);
                    matched_boxes.extend_from_slice(&gt_boxes[t]);
                }
            }
        }
        let logits = g.gather_rows(stage.logits, regular_idx.clone());
        let ce = g.cross_entropy(logits, targets, weights);
        cls_sum += g.value(ce).item();
        terms.push(g.scale(ce, w.cls));
        if !matched_rows.is_empty() {
            let k = matched_rows.len();
            let pred = g.gather_rows(stage.boxes, Arc::new(matched_rows));
            let target = Tensor::from_vec(k, 4, matched_boxes);
            let l1 = g.l1_rows(pred, target.clone(), vec![norm; k]);
            let gi = g.giou_rows(pred, target, vec![norm; k]);
            l1_sum += g.value(l1).item();
            giou_sum += g.value(gi).item();
            terms.push(g.scale(l1, w.l1));
            terms.push(g.scale(gi, w.giou));
        }
    }
    let total = g.add_all(&terms);
    Ok(DetectionLoss {
        total,
        cls: cls_sum,
        l1: l1_sum,
        giou: giou_sum,
    })
}
