use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MembershipRule;

/// Which features the feature-level term distills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// Plain per-level squared error on backbone maps.
    BackboneOnly,
    /// Masked, scale-normalized squared error on the encoder memory.
    #[default]
    MemoryOnly,
    Both,
}

impl Recipe {
    pub fn uses_backbone(self) -> bool {
        matches!(self, Recipe::BackboneOnly | Recipe::Both)
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Recipe::MemoryOnly | Recipe::Both)
    }
}

/// Classes over which the teacher confidence maximum is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceClasses {
    /// Every softmax entry, background included.
    #[default]
    All,
    ForegroundOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Foreground weight of the memory loss.
    pub alpha: f64,
    /// Background weight of the memory loss.
    pub beta: f64,
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub temperature: f64,
    /// Multiply the KL term by `T^2`.
    pub kl_temperature_squared: bool,
    /// Total distillation queries per image, ground-truth copies and padding.
    pub num_distill_points: usize,
    pub num_copies: usize,
    /// Uniform jitter of each copy's box, relative to its width and height.
    pub box_jitter: f64,
    /// Pad with shared random points up to `num_distill_points`.
    pub include_kddetr_points: bool,
    pub recipe: Recipe,
    /// Weight of the backbone feature term when the recipe uses it.
    pub backbone_weight: f64,
    pub confidence_classes: ConfidenceClasses,
    pub membership: MembershipRule,
    /// Feed the decoder location-masked memory instead of the raw memory.
    pub mask_decoder_memory: bool,
    /// Seed of the frozen class and box embedders.
    pub embedder_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 5e-5,
            beta: 1e-7,
            lambda_cls: 1.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            temperature: 2.0,
            kl_temperature_squared: true,
            num_distill_points: 300,
            num_copies: 3,
            box_jitter: 0.0,
            include_kddetr_points: true,
            recipe: Recipe::MemoryOnly,
            backbone_weight: 1.0,
            confidence_classes: ConfidenceClasses::All,
            membership: MembershipRule::CellCenter,
            mask_decoder_memory: false,
            embedder_seed: 0x5eed,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if ![
            self.alpha,
            self.beta,
            self.lambda_cls,
            self.lambda_l1,
            self.lambda_giou,
            self.box_jitter,
            self.backbone_weight,
        ]
        .into_iter()
        .all(finite_nonneg)
        {
            return err("loss weights and jitter must be finite and nonnegative");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return err("temperature must be positive");
        }
        if self.num_distill_points == 0 || self.num_copies == 0 {
            return err("num_distill_points and num_copies must be positive");
        }
        Ok(())
    }
}
