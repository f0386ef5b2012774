//! COCO-style average precision with 101-point interpolation.

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::geometry::{iou_corners, GroundTruthInstance};

/// Detections kept per image, as in COCO's `maxDets = 100`.
pub const MAX_DETECTIONS: usize = 100;

/// COCO's small/medium side thresholds in pixels at 640 resolution.
const COCO_SMALL: f64 = 32.0;
const COCO_MEDIUM: f64 = 96.0;
const COCO_REFERENCE_SIZE: f64 = 640.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over IoU thresholds `.50:.05:.95`.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the stratum.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_ground_truths: usize,
    pub eval_seconds: f64,
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Area range in squared pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        min: 0.0,
        max: f64::INFINITY,
    };

    /// Small, medium and large ranges with COCO's thresholds scaled to a
    /// square image of side `image_size` pixels.
    pub fn strata(image_size: usize) -> [AreaRange; 3] {
        let s = image_size as f64 / COCO_REFERENCE_SIZE;
        let small = (COCO_SMALL * s).powi(2);
        let medium = (COCO_MEDIUM * s).powi(2);
        [
            AreaRange { min: 0.0, max: small },
            AreaRange {
                min: small,
                max: medium,
            },
            AreaRange {
                min: medium,
                max: f64::INFINITY,
            },
        ]
    }

    fn contains(&self, area: f64) -> bool {
        area >= self.min && area <= self.max
    }
}

/// Per-image match outcome for one class, threshold and area range.
struct ImageEval {
    /// `(score, matched, ignored)` per detection, in score order.
    dets: Vec<(f64, bool, bool)>,
    num_gt: usize,
}

fn evaluate_image(
    dets: &[&Detection],
    gts: &[&GroundTruthInstance],
    image_area: f64,
    threshold: f64,
    range: AreaRange,
) -> ImageEval {
    // non-ignored ground truths first, as COCO does
    let mut gt_order: Vec<(usize, bool)> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| (i, !range.contains(g.bbox.area() * image_area)))
        .collect();
    gt_order.sort_by_key(|&(_, ignored)| ignored);
    let gt_corners: Vec<[f64; 4]> = gt_order.iter().map(|&(i, _)| gts[i].bbox.corners()).collect();
    let mut taken = vec![false; gt_order.len()];

    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let dc = d.bbox.corners();
        let mut best_iou = threshold.min(1.0 - 1e-10);
        let mut best: Option<usize> = None;
        for (j, &(_, ignored)) in gt_order.iter().enumerate() {
            if taken[j] {
                continue;
            }
            // keep a regular match rather than switching to an ignored one
            if let Some(b) = best {
                if !gt_order[b].1 && ignored {
                    break;
                }
            }
            let iou = iou_corners(dc, gt_corners[j]);
            if iou < best_iou {
                continue;
            }
            best_iou = iou;
            best = Some(j);
        }
        match best {
            Some(j) => {
                taken[j] = true;
                out.push((d.score, true, gt_order[j].1));
            }
            None => {
                let outside = !range.contains(d.bbox.area() * image_area);
                out.push((d.score, false, outside));
            }
        }
    }
    ImageEval {
        dets: out,
        num_gt: gt_order.iter().filter(|(_, ig)| !ig).count(),
    }
}

/// 101-point interpolated precision from score-ordered match flags.
/// Returns `None` when there are no ground truths.
pub fn interpolated_ap(mut dets: Vec<(f64, bool)>, num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    // stable sort keeps the per-image order among equal scores
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (_, matched) in &dets {
        if *matched {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / num_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / 101.0)
}

/// AP of one class at one IoU threshold over an area range.
pub fn class_ap(
    predictions: &[Vec<Detection>],
    gts: &[Vec<GroundTruthInstance>],
    class_id: usize,
    image_size: usize,
    threshold: f64,
    range: AreaRange,
) -> Option<f64> {
    let image_area = (image_size * image_size) as f64;
    let mut all = Vec::new();
    let mut num_gt = 0;
    for (preds, img_gts) in predictions.iter().zip(gts) {
        let mut dets: Vec<&Detection> = preds.iter().filter(|d| d.class_id == class_id).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(MAX_DETECTIONS);
        let g: Vec<&GroundTruthInstance> = img_gts.iter().filter(|g| g.class_id == class_id).collect();
        let e = evaluate_image(&dets, &g, image_area, threshold, range);
        num_gt += e.num_gt;
        all.extend(
            e.dets
                .into_iter()
                .filter(|&(_, _, ignored)| !ignored)
                .map(|(s, m, _)| (s, m)),
        );
    }
    interpolated_ap(all, num_gt)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full COCO-style report. `predictions[i]` and `gts[i]` describe image `i`.
pub fn evaluate_detections(
    predictions: &[Vec<Detection>],
    gts: &[Vec<GroundTruthInstance>],
    num_classes: usize,
    image_size: usize,
) -> EvalReport {
    assert_eq!(predictions.len(), gts.len(), "one prediction list per image");
    let start = std::time::Instant::now();
    let thresholds = iou_thresholds();
    let summary = |range: AreaRange, ts: &[f64]| {
        mean((0..num_classes).map(|c| {
            mean(
                ts.iter()
                    .map(|&t| class_ap(predictions, gts, c, image_size, t, range)),
            )
        }))
    };
    let per_class_ap = (0..num_classes)
        .map(|c| {
            mean(
                thresholds
                    .iter()
                    .map(|&t| class_ap(predictions, gts, c, image_size, t, AreaRange::ALL)),
            )
        })
        .collect();
    let [small, medium, large] = AreaRange::strata(image_size);
    EvalReport {
        ap: summary(AreaRange::ALL, &thresholds).unwrap_or(0.0),
        ap50: summary(AreaRange::ALL, &[0.5]).unwrap_or(0.0),
        ap75: summary(AreaRange::ALL, &[0.75]).unwrap_or(0.0),
        ap_small: summary(small, &thresholds),
        ap_medium: summary(medium, &thresholds),
        ap_large: summary(large, &thresholds),
        per_class_ap,
        num_images: predictions.len(),
        num_detections: predictions.iter().map(Vec::len).sum(),
        num_ground_truths: gts.iter().map(Vec::len).sum(),
        eval_seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn gt(c: usize, b: [f64; 4]) -> GroundTruthInstance {
        GroundTruthInstance::new(c, BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap())
    }

    fn det(c: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            class_id: c,
            score,
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![
            vec![gt(0, [0.3, 0.3, 0.2, 0.2]), gt(1, [0.7, 0.7, 0.3, 0.3])],
            vec![gt(2, [0.5, 0.5, 0.4, 0.4])],
        ];
        let preds: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|g| Detection { class_id: g.class_id, score: 1.0, bbox: g.bbox }).collect())
            .collect();
        let r = evaluate_detections(&preds, &gts, 3, 64);
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!(r.per_class_ap, vec![Some(1.0); 3]);
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = vec![vec![gt(0, [0.3, 0.3, 0.2, 0.2])]];
        let r = evaluate_detections(&[vec![]], &gts, 1, 64);
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_false_positive_ranked_first() {
        let gts = vec![vec![gt(0, [0.3, 0.3, 0.2, 0.2])], vec![gt(0, [0.6, 0.6, 0.2, 0.2])]];
        let preds = vec![
            vec![det(0, 0.9, [0.8, 0.2, 0.1, 0.1]), det(0, 0.8, [0.3, 0.3, 0.2, 0.2])],
            vec![det(0, 0.7, [0.6, 0.6, 0.2, 0.2])],
        ];
        // precision envelope 2/3 at recall .5 and 1.0
        let r = evaluate_detections(&preds, &gts, 1, 64);
        assert!((r.ap50 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn strata_scale_with_image_size() {
        let [s, m, l] = AreaRange::strata(640);
        assert_eq!(s.max, 1024.0);
        assert_eq!(m.max, 9216.0);
        assert_eq!(l.min, 9216.0);
        let [s, _, _] = AreaRange::strata(64);
        assert!((s.max - 10.24).abs() < 1e-9);
    }
}
