mod common;

use clockdistill::detector::{LossWeights, StagePredictions};
use clockdistill::distill::{confidence_weights, logit_distill_loss_weighted, ConfidenceClasses, DistillConfig};
use clockdistill::eval::evaluate_detections;
use clockdistill::matching::{hungarian_match, matching_cost, solve_assignment};
use clockdistill::tensor::Tensor;
use common::{ap_case, brute_force_assignment, matching_case, naive_ap, rng};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn assignment_is_optimal(
        rows in 1usize..7,
        extra in 0usize..3,
        seed in any::<u64>(),
    ) {
        let cols = rows + extra;
        let mut r = rng(seed);
        let cost: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-3.0..3.0)).collect();
        let a = solve_assignment(&cost, rows, cols).unwrap();
        let mut seen = a.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), rows);
        let total: f64 = a.iter().enumerate().map(|(i, &c)| cost[i * cols + c]).sum();
        prop_assert!((total - brute_force_assignment(&cost, rows, cols)).abs() < 1e-9);
    }

    #[test]
    fn confidence_weights_are_probabilities(
        logits in prop::collection::vec(-20.0f64..20.0, 4),
        shift in -50.0f64..50.0,
    ) {
        let t = Tensor::from_vec(1, 4, logits.clone());
        let shifted = Tensor::from_vec(1, 4, logits.iter().map(|v| v + shift).collect());
        for classes in [ConfidenceClasses::All, ConfidenceClasses::ForegroundOnly] {
            let w = confidence_weights(&t, classes)[0];
            prop_assert!(w > 0.0 && w <= 1.0);
            prop_assert!((w - confidence_weights(&shifted, classes)[0]).abs() < 1e-12);
        }
        prop_assert!(confidence_weights(&t, ConfidenceClasses::All)[0] >= 0.25 - 1e-12);
    }
}

fn preds(logits: Vec<f64>, boxes: [f64; 4]) -> StagePredictions {
    StagePredictions {
        class_logits: vec![Tensor::from_vec(1, logits.len(), logits)],
        boxes: vec![Tensor::from_vec(1, 4, boxes.to_vec())],
    }
}

#[test]
fn kl_term_is_nonnegative_and_vanishes_only_at_equality() {
    let cfg = DistillConfig {
        lambda_l1: 0.0,
        lambda_giou: 0.0,
        ..DistillConfig::default()
    };
    let mut r = rng(11);
    let b = [0.5, 0.5, 0.3, 0.3];
    for _ in 0..1000 {
        let t: Vec<f64> = (0..4).map(|_| r.gen_range(-5.0..5.0)).collect();
        let s: Vec<f64> = (0..4).map(|_| r.gen_range(-5.0..5.0)).collect();
        let kl = logit_distill_loss_weighted(&preds(t.clone(), b), &preds(s, b), &[vec![1.0]], &cfg).unwrap();
        assert!(kl > 0.0, "{kl}");
        let same = logit_distill_loss_weighted(&preds(t.clone(), b), &preds(t, b), &[vec![1.0]], &cfg).unwrap();
        assert!(same.abs() < 1e-12, "{same}");
    }
}

#[test]
fn hungarian_match_minimizes_the_matching_cost() {
    let mut r = rng(5);
    for _ in 0..200 {
        let c = matching_case(&mut r);
        let w = LossWeights::default();
        let cost = matching_cost(&c.probs, &c.boxes, &c.classes, &c.gt_boxes, w).unwrap();
        let m = hungarian_match(&c.probs, &c.boxes, &c.classes, &c.gt_boxes, w).unwrap();
        let (rows, cols) = (c.classes.len(), c.probs.len());
        let total: f64 = m.iter().map(|&(q, g)| cost[g * cols + q]).sum();
        assert!((total - brute_force_assignment(&cost, rows, cols)).abs() < 1e-9);
    }
}

#[test]
fn ap_matches_naive_reference() {
    let mut r = rng(21);
    for case in 0..200 {
        let (preds, gts) = ap_case(&mut r);
        let report = evaluate_detections(&preds, &gts, 2, 64);
        let reference = naive_ap(&preds, &gts, 2);
        assert!((report.ap - reference).abs() < 1e-12, "case {case}: {} vs {reference}", report.ap);
    }
}
