mod common;

use clockdistill::harness::{evaluate, ExperimentConfig};

/// Pinned from the measured reference teacher (val AP 0.219, AP50 0.374)
/// with some slack for platform float differences.
const MIN_AP: f64 = 0.18;
const MIN_AP50: f64 = 0.33;

#[test]
fn reference_teacher_meets_regression_bound() {
    let cfg = ExperimentConfig::reference();
    let train = cfg.train_data.load().unwrap();
    let val = cfg.val_data.load().unwrap();
    let teacher = common::reference_teacher(&cfg, &train, &val).unwrap();
    let r = evaluate(&teacher, &val, &cfg.eval).unwrap();
    assert!(r.ap >= MIN_AP && r.ap50 >= MIN_AP50, "teacher AP {:.4} AP50 {:.4}", r.ap, r.ap50);
}
