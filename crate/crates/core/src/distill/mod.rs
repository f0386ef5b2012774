//! Feature, memory and logit distillation from a frozen teacher.

mod config;
mod losses;
mod queries;

pub use config::{ConfidenceClasses, DistillConfig, Recipe};
pub use losses::{
    backbone_distill_var, backbone_feature_distill_loss, confidence_weights, logit_distill_loss,
    logit_distill_loss_weighted, logit_distill_var, memory_distill_loss, memory_distill_var,
    stage_pairs, total_loss, Adapter,
};
pub use queries::{
    build_target_queries, ensure_same_query_set, ContentSource, FrozenEmbedders, QueryOrigin,
    TargetAwareQuerySet,
};
