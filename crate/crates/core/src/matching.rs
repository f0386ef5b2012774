//! Minimum-cost bipartite matching between ground truths and predictions.

use crate::detector::LossWeights;
use crate::error::{Error, Result};
use crate::geometry::{box_convert, giou_corners, BoxForm};

/// Solves the rectangular assignment problem for a `rows x cols` cost matrix
/// (row-major, `rows <= cols`). Returns the column assigned to each row.
///
/// Shortest augmenting paths with dual potentials, `O(rows^2 * cols)`.
pub fn solve_assignment(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(Error::Config(format!(
            "{rows} ground truths but only {cols} queries"
        )));
    }
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    // 1-based indexing with a virtual column 0, following the classic
    // potential-based formulation.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Matching cost between every ground truth (rows) and prediction (columns):
/// `cls * (-p[class]) + l1 * L1 + giou * (1 - GIoU)`.
///
/// `probs` holds per-query class probabilities, `boxes` center-form boxes.
pub fn matching_cost(
    probs: &[Vec<f64>],
    boxes: &[[f64; 4]],
    gt_classes: &[usize],
    gt_boxes: &[[f64; 4]],
    weights: LossWeights,
) -> Result<Vec<f64>> {
    let cols = probs.len();
    assert_eq!(boxes.len(), cols);
    let mut cost = Vec::with_capacity(gt_classes.len() * cols);
    for (&c, gb) in gt_classes.iter().zip(gt_boxes) {
        let gc = box_convert(*gb, BoxForm::Center, BoxForm::Corner);
        for (p, pb) in probs.iter().zip(boxes) {
            let l1: f64 = pb.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
            let g = giou_corners(box_convert(*pb, BoxForm::Center, BoxForm::Corner), gc)?;
            cost.push(-weights.cls * p[c] + weights.l1 * l1 + weights.giou * (1.0 - g));
        }
    }
    Ok(cost)
}

/// Hungarian matching of predictions to ground truths; returns
/// `(query_index, gt_index)` pairs sorted by ground truth.
pub fn hungarian_match(
    probs: &[Vec<f64>],
    boxes: &[[f64; 4]],
    gt_classes: &[usize],
    gt_boxes: &[[f64; 4]],
    weights: LossWeights,
) -> Result<Vec<(usize, usize)>> {
    let rows = gt_classes.len();
    let cols = probs.len();
    if rows > cols {
        return Err(Error::Config(format!(
            "{rows} ground truths but only {cols} queries"
        )));
    }
    let cost = matching_cost(probs, boxes, gt_classes, gt_boxes, weights)?;
    let assignment = solve_assignment(&cost, rows, cols)?;
    Ok(assignment.into_iter().enumerate().map(|(g, q)| (q, g)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_known_problem() {
        // optimum picks the anti-diagonal
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = solve_assignment(&cost, 3, 3).unwrap();
        let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * 3 + c]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn too_many_gts_is_an_error() {
        assert!(matches!(
            solve_assignment(&[0.0; 6], 3, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn perfect_predictions_match_their_gts() {
        let gts = [[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]];
        let boxes = [gts[1], [0.5, 0.5, 0.1, 0.1], gts[0]];
        let probs = vec![vec![0.0, 1.0, 0.0], vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0]];
        let m = hungarian_match(&probs, &boxes, &[0, 1], &gts, LossWeights::default()).unwrap();
        assert_eq!(m, vec![(2, 0), (0, 1)]);
        let cost = matching_cost(&probs, &boxes, &[0, 1], &gts, LossWeights::default()).unwrap();
        // each perfect pair costs exactly -1
        assert_eq!(cost[2] + cost[3], -2.0);
    }
}
