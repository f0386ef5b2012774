//! Fused scalar losses and their analytic gradients.

use crate::tensor::Tensor;

pub(super) fn weighted_sq_err(student: &Tensor, teacher: &Tensor, weights: &[f64]) -> f64 {
    assert_eq!(student.shape(), teacher.shape(), "distillation shape mismatch");
    assert_eq!(weights.len(), student.rows());
    let mut total = 0.0;
    for (r, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let row: f64 = student
            .row(r)
            .iter()
            .zip(teacher.row(r))
            .map(|(s, t)| (t - s) * (t - s))
            .sum();
        total += w * row;
    }
    total
}

pub(super) fn weighted_sq_err_grad(
    student: &Tensor,
    teacher: &Tensor,
    weights: &[f64],
    upstream: f64,
    d: &mut Tensor,
) {
    for (r, w) in weights.iter().enumerate() {
        let f = 2.0 * w * upstream;
        for ((o, s), t) in d.row_mut(r).iter_mut().zip(student.row(r)).zip(teacher.row(r)) {
            *o += f * (s - t);
        }
    }
}

pub(super) fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    weights: &[f64],
) -> (f64, Tensor, f64) {
    assert_eq!(targets.len(), logits.rows());
    assert_eq!(weights.len(), logits.rows());
    let probs = super::softmax_rows(logits, 1.0);
    let norm: f64 = weights.iter().sum();
    let mut total = 0.0;
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += w * (lse - row[t]);
    }
    let norm = if norm > 0.0 { norm } else { 1.0 };
    (total / norm, probs, norm)
}

pub(super) fn cross_entropy_grad(
    probs: &Tensor,
    targets: &[usize],
    weights: &[f64],
    norm: f64,
    upstream: f64,
    d: &mut Tensor,
) {
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let f = upstream * w / norm;
        for (c, (o, p)) in d.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
            let onehot = if c == t { 1.0 } else { 0.0 };
            *o += f * (p - onehot);
        }
    }
}

pub(super) fn kl_div(
    student: &Tensor,
    teacher: &Tensor,
    temperature: f64,
    weights: &[f64],
) -> (f64, Tensor, Tensor) {
    assert_eq!(student.shape(), teacher.shape(), "logit shape mismatch");
    assert_eq!(weights.len(), student.rows());
    let pt = super::softmax_rows(teacher, temperature);
    let ps = super::softmax_rows(student, temperature);
    let t2 = temperature * temperature;
    let mut total = 0.0;
    for (r, w) in weights.iter().enumerate() {
        // log-softmax directly from logits for accuracy
        let ls = log_softmax(student.row(r), temperature);
        let lt = log_softmax(teacher.row(r), temperature);
        let kl: f64 = pt
            .row(r)
            .iter()
            .zip(lt.iter().zip(&ls))
            .map(|(p, (a, b))| if *p > 0.0 { p * (a - b) } else { 0.0 })
            .sum();
        total += w * t2 * kl;
    }
    (total, pt, ps)
}

fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = max
        + row
            .iter()
            .map(|v| (v / temperature - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|v| v / temperature - lse).collect()
}

pub(super) fn kl_div_grad(
    pt: &Tensor,
    ps: &Tensor,
    temperature: f64,
    weights: &[f64],
    upstream: f64,
    d: &mut Tensor,
) {
    for (r, w) in weights.iter().enumerate() {
        let f = upstream * w * temperature;
        for ((o, s), t) in d.row_mut(r).iter_mut().zip(ps.row(r)).zip(pt.row(r)) {
            *o += f * (s - t);
        }
    }
}

pub(super) fn l1_rows(pred: &Tensor, target: &Tensor, weights: &[f64]) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    assert_eq!(weights.len(), pred.rows());
    weights
        .iter()
        .enumerate()
        .map(|(r, w)| {
            w * pred
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
        })
        .sum()
}

pub(super) fn l1_rows_grad(
    pred: &Tensor,
    target: &Tensor,
    weights: &[f64],
    upstream: f64,
    d: &mut Tensor,
) {
    for (r, w) in weights.iter().enumerate() {
        for ((o, p), t) in d.row_mut(r).iter_mut().zip(pred.row(r)).zip(target.row(r)) {
            let sign = if p > t {
                1.0
            } else if p < t {
                -1.0
            } else {
                0.0
            };
            *o += upstream * w * sign;
        }
    }
}

/// `1 - GIoU` of a center-form prediction against a center-form target, and
/// its gradient with respect to the prediction.
pub(crate) fn giou_loss_and_grad(pred: &[f64], target: &[f64]) -> (f64, [f64; 4]) {
    let (ax0, ax1) = (pred[0] - 0.5 * pred[2], pred[0] + 0.5 * pred[2]);
    let (ay0, ay1) = (pred[1] - 0.5 * pred[3], pred[1] + 0.5 * pred[3]);
    let (bx0, bx1) = (target[0] - 0.5 * target[2], target[0] + 0.5 * target[2]);
    let (by0, by1) = (target[1] - 0.5 * target[3], target[1] + 0.5 * target[3]);

    let (aw, ah) = (ax1 - ax0, ay1 - ay0);
    let area_a = aw * ah;
    let area_b = (bx1 - bx0) * (by1 - by0);

    let iw_raw = ax1.min(bx1) - ax0.max(bx0);
    let ih_raw = ay1.min(by1) - ay0.max(by0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let iou = inter / union;
    let ew = ax1.max(bx1) - ax0.min(bx0);
    let eh = ay1.max(by1) - ay0.min(by0);
    let enc = ew * eh;
    let loss = 2.0 - iou - union / enc;

    // partials with respect to (ax0, ay0, ax1, ay1)
    let d_iw = if iw_raw > 0.0 {
        [
            if ax0 > bx0 { -1.0 } else { 0.0 },
            0.0,
            if ax1 < bx1 { 1.0 } else { 0.0 },
            0.0,
        ]
    } else {
        [0.0; 4]
    };
    let d_ih = if ih_raw > 0.0 {
        [
            0.0,
            if ay0 > by0 { -1.0 } else { 0.0 },
            0.0,
            if ay1 < by1 { 1.0 } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_area_a = [-ah, -aw, ah, aw];
    let d_ew = [
        if ax0 <= bx0 { -1.0 } else { 0.0 },
        0.0,
        if ax1 >= bx1 { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_eh = [
        0.0,
        if ay0 <= by0 { -1.0 } else { 0.0 },
        0.0,
        if ay1 >= by1 { 1.0 } else { 0.0 },
    ];
    let mut g_corner = [0.0; 4];
    for i in 0..4 {
        let d_inter = d_iw[i] * ih + iw * d_ih[i];
        let d_union = d_area_a[i] - d_inter;
        let d_enc = d_ew[i] * eh + ew * d_eh[i];
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enc - union * d_enc) / (enc * enc);
        g_corner[i] = -d_iou - d_ratio;
    }
    let grad = [
        g_corner[0] + g_corner[2],
        g_corner[1] + g_corner[3],
        0.5 * (g_corner[2] - g_corner[0]),
        0.5 * (g_corner[3] - g_corner[1]),
    ];
    (loss, grad)
}

pub(super) fn giou_rows(pred: &Tensor, target: &Tensor, weights: &[f64]) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    assert_eq!(pred.cols(), 4, "boxes must have 4 columns");
    assert_eq!(weights.len(), pred.rows());
    weights
        .iter()
        .enumerate()
        .map(|(r, w)| w * giou_loss_and_grad(pred.row(r), target.row(r)).0)
        .sum()
}

pub(super) fn giou_rows_grad(
    pred: &Tensor,
    target: &Tensor,
    weights: &[f64],
    upstream: f64,
    d: &mut Tensor,
) {
    for (r, w) in weights.iter().enumerate() {
        let (_, g) = giou_loss_and_grad(pred.row(r), target.row(r));
        for (o, gi) in d.row_mut(r).iter_mut().zip(g) {
            *o += upstream * w * gi;
        }
    }
}
