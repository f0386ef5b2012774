//! Experiment orchestration: teacher pretraining, student distillation,
//! evaluation, attention export and ablation reports.

mod ablation;
mod attention;
mod config;
mod metrics;
mod train;

pub use ablation::{
    AttentionComparison, ComponentReport, ComponentRow, ExperimentRunner, LayerCell, LayerReport,
    RunKey,
};
pub use attention::{
    attention_heatmaps, attention_mass_in_boxes, colormap, export_attention, received_attention,
    render_heatmap, LayerSelector,
};
pub use config::{
    derive_seed, EvalConfig, ExperimentConfig, SplitConfig, Stream, Toggles, TrainConfig,
};
pub use metrics::{moving_average, MetricsLog, StepRecord};
pub use train::{
    compute_teacher_targets, distill_student, evaluate, query_seed, train_loop, train_teacher,
    StepLosses, StudentObjective, TeacherTargets, TrainedModel,
};
