//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::time::Instant;

use clockdistill::checkpoint::Checkpoint;
use clockdistill::data::{Image, Sample};
use clockdistill::detector::{Detection, Detector, DetectorConfig};
use clockdistill::geometry::{BoundingBox, GroundTruthInstance};
use clockdistill::harness::{train_teacher, ExperimentConfig, MetricsLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct MatchingCase {
    pub probs: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
    pub gt_boxes: Vec<[f64; 4]>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gt(class_id: usize, b: [f64; 4]) -> GroundTruthInstance {
    GroundTruthInstance::new(class_id, BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap())
}

pub fn corner_gt(class_id: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> GroundTruthInstance {
    GroundTruthInstance::new(class_id, BoundingBox::from_corners(x0, y0, x1, y1).unwrap())
}

/// Random center-form box that stays inside the unit square.
pub fn random_box(rng: &mut impl Rng, min_side: f64, max_side: f64) -> [f64; 4] {
    let w = rng.gen_range(min_side..max_side);
    let h = rng.gen_range(min_side..max_side);
    let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
    [cx, cy, w, h]
}

pub fn noise_image(size: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_vec(size, size, (0..size * size * 3).map(|_| r.gen()).collect())
}

/// One level of stride 4 on an 8 pixel image: 4 memory tokens.
pub fn micro_config() -> DetectorConfig {
    DetectorConfig {
        image_size: 8,
        level_strides: vec![4],
        backbone_channels: 4,
        embed_dim: 8,
        encoder_layers: 1,
        decoder_layers: 2,
        attention_heads: 2,
        num_object_queries: 2,
        num_classes: 2,
        mlp_hidden: 4,
        ..DetectorConfig::default()
    }
}

/// Moves every parameter off special values such as zero-initialized
/// heads, so finite differences see generic slopes.
pub fn jitter(det: &mut Detector, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for id in det.params.ids().collect::<Vec<_>>() {
        for v in det.params.value_mut(id).data_mut() {
            *v += r.gen_range(-scale..scale);
        }
    }
}

/// Cell-by-cell rasterizer: a cell is foreground when its center lies in
/// any closed box.
pub fn brute_location_mask(gts: &[GroundTruthInstance], height: usize, width: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let cy = (r as f64 + 0.5) / height as f64;
            let cx = (c as f64 + 0.5) / width as f64;
            out.push(gts.iter().any(|g| {
                let [x0, y0, x1, y1] = g.bbox.corners();
                x0 <= cx && cx <= x1 && y0 <= cy && cy <= y1
            }));
        }
    }
    out
}

/// Cells whose center lies in box `g`.
pub fn cells_of(g: &GroundTruthInstance, height: usize, width: usize) -> Vec<usize> {
    brute_location_mask(std::slice::from_ref(g), height, width)
        .iter()
        .enumerate()
        .filter_map(|(p, &m)| m.then_some(p))
        .collect()
}

fn corner_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Straightforward AP of one class at one threshold: greedy matching in
/// score order, then for every recall level the best precision reached at
/// that recall or beyond.
fn naive_class_ap(
    preds: &[Vec<Detection>],
    gts: &[Vec<GroundTruthInstance>],
    class_id: usize,
    threshold: f64,
) -> Option<f64> {
    let num_gt: usize = gts
        .iter()
        .map(|g| g.iter().filter(|x| x.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    let mut flagged: Vec<(f64, bool)> = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let g: Vec<[f64; 4]> = g
            .iter()
            .filter(|x| x.class_id == class_id)
            .map(|x| x.bbox.corners())
            .collect();
        let mut used = vec![false; g.len()];
        let mut d: Vec<&Detection> = p.iter().filter(|x| x.class_id == class_id).collect();
        d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        for det in d {
            let mut best: Option<(usize, f64)> = None;
            for (j, gb) in g.iter().enumerate() {
                let iou = corner_iou(det.bbox.corners(), *gb);
                if !used[j] && iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            flagged.push((det.score, best.is_some()));
        }
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (i, &(_, hit)) in flagged.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|&(_, prec)| prec)
            .fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

/// Mean over classes with ground truths of the mean AP over IoU
/// thresholds 0.50, 0.55, ..., 0.95.
pub fn naive_ap(preds: &[Vec<Detection>], gts: &[Vec<GroundTruthInstance>], num_classes: usize) -> f64 {
    let per_class: Vec<f64> = (0..num_classes)
        .filter_map(|c| {
            let aps: Option<Vec<f64>> = (0..10)
                .map(|t| naive_class_ap(preds, gts, c, 0.5 + 0.05 * t as f64))
                .collect();
            aps.map(|a| a.iter().sum::<f64>() / a.len() as f64)
        })
        .collect();
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Minimum total cost over every injective map from rows to columns.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
        if r == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r * cols + c] + go(cost, rows, cols, r + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, rows, cols, 0, &mut vec![false; cols])
}

/// Up to six ground truths and a few more queries with random class
/// probabilities over three classes plus background.
pub fn matching_case(r: &mut ChaCha8Rng) -> MatchingCase {
    let n_gt = r.gen_range(1..=6);
    let n_q = n_gt + r.gen_range(0..4);
    let probs = (0..n_q)
        .map(|_| {
            let raw: Vec<f64> = (0..4).map(|_| r.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    MatchingCase {
        probs,
        boxes: (0..n_q).map(|_| random_box(r, 0.05, 0.6)).collect(),
        classes: (0..n_gt).map(|_| r.gen_range(0..3)).collect(),
        gt_boxes: (0..n_gt).map(|_| random_box(r, 0.05, 0.6)).collect(),
    }
}

/// A few images with two classes: noisy copies of most ground truths,
/// occasional class swaps and some unrelated false positives.
pub fn ap_case(r: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruthInstance>>) {
    let det = |class_id: usize, score: f64, b: [f64; 4]| Detection {
        class_id,
        score,
        bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
    };
    let mut all_preds = Vec::new();
    let mut all_gts = Vec::new();
    for _ in 0..r.gen_range(1..4) {
        let n = r.gen_range(0..4);
        let gts: Vec<_> = (0..n).map(|_| gt(r.gen_range(0..2), random_box(r, 0.1, 0.5))).collect();
        let mut preds = Vec::new();
        for g in &gts {
            if r.gen_bool(0.8) {
                let [cx, cy, w, h] = g.bbox.to_array();
                let b = [
                    (cx + r.gen_range(-0.03..0.03)).clamp(0.2, 0.8),
                    (cy + r.gen_range(-0.03..0.03)).clamp(0.2, 0.8),
                    (w + r.gen_range(-0.04..0.04)).clamp(0.05, 0.4),
                    (h + r.gen_range(-0.04..0.04)).clamp(0.05, 0.4),
                ];
                let class_id = if r.gen_bool(0.9) { g.class_id } else { 1 - g.class_id };
                preds.push(det(class_id, r.gen_range(0.0..1.0), b));
            }
        }
        for _ in 0..r.gen_range(0..3) {
            let b = random_box(r, 0.05, 0.5);
            preds.push(det(r.gen_range(0..2), r.gen_range(0.0..1.0), b));
        }
        all_preds.push(preds);
        all_gts.push(gts);
    }
    (all_preds, all_gts)
}

fn teacher_cache(cfg: &ExperimentConfig) -> PathBuf {
    let key = serde_json::to_string(&(&cfg.teacher, &cfg.teacher_training, &cfg.train_data.spec, cfg.seed))
        .expect("config serializes");
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("teacher-{:016x}.ckpt", h.finish()))
}

/// Teacher of the reference experiment, trained on first use and then
/// cached under the cargo target directory.
pub fn reference_teacher(
    cfg: &ExperimentConfig,
    train: &[Sample],
    val: &[Sample],
) -> clockdistill::Result<Detector> {
    let path = teacher_cache(cfg);
    if let Ok(t) = Checkpoint::load(&path).and_then(|c| c.to_detector()) {
        if t.config == cfg.teacher {
            eprintln!("reusing teacher {}", path.display());
            return Ok(t);
        }
    }
    let start = Instant::now();
    let t = train_teacher(cfg, train, val, &mut MetricsLog::in_memory(), None)?;
    eprintln!(
        "teacher trained in {:.0}s: val AP {:.4} AP50 {:.4}, saved to {}",
        start.elapsed().as_secs_f64(),
        t.report.ap,
        t.report.ap50,
        path.display()
    );
    t.checkpoint()?.save(&path)?;
    Ok(t.detector)
}
