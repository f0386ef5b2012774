use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridShape;

/// Weights of the classification, L1 and GIoU terms, shared by the matcher,
/// the detection loss and logit distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Stride of each feature level; each level halves the previous one.
    pub level_strides: Vec<usize>,
    pub backbone_channels: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub num_object_queries: usize,
    /// Foreground classes; the background class is index `num_classes`.
    pub num_classes: usize,
    pub mlp_hidden: usize,
    /// Cross-entropy weight of the background class.
    pub no_object_weight: f64,
    pub loss_weights: LossWeights,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::reference_student()
    }
}

impl DetectorConfig {
    /// Desk-scale teacher: width 128, 4 encoder and 4 decoder layers.
    pub fn reference_teacher() -> Self {
        DetectorConfig {
            image_size: 64,
            level_strides: vec![8, 16],
            backbone_channels: 128,
            embed_dim: 128,
            encoder_layers: 4,
            decoder_layers: 4,
            attention_heads: 4,
            num_object_queries: 16,
            num_classes: 3,
            mlp_hidden: 256,
            no_object_weight: 0.1,
            loss_weights: LossWeights::default(),
        }
    }

    /// Desk-scale student: width 64, 2 encoder and 2 decoder layers.
    pub fn reference_student() -> Self {
        DetectorConfig {
            backbone_channels: 64,
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            mlp_hidden: 128,
            ..DetectorConfig::reference_teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.attention_heads == 0 {
            return err("embed_dim and attention_heads must be positive".into());
        }
        if self.embed_dim % self.attention_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.attention_heads
            ));
        }
        // four box coordinates, each embedded as sine/cosine pairs
        if self.embed_dim % 8 != 0 {
            return err(format!("embed_dim {} must be a multiple of 8", self.embed_dim));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return err("encoder and decoder need at least one layer".into());
        }
        if self.num_object_queries == 0 || self.num_classes == 0 {
            return err("num_object_queries and num_classes must be positive".into());
        }
        if self.mlp_hidden == 0 || self.backbone_channels == 0 {
            return err("mlp_hidden and backbone_channels must be positive".into());
        }
        let Some(&first) = self.level_strides.first() else {
            return err("at least one feature level is required".into());
        };
        if first == 0 {
            return err("strides must be positive".into());
        }
        for w in self.level_strides.windows(2) {
            if w[1] != 2 * w[0] {
                return err(format!(
                    "each level stride must double the previous one, got {:?}",
                    self.level_strides
                ));
            }
        }
        for &s in &self.level_strides {
            if self.image_size % s != 0 {
                return err(format!(
                    "image size {} not divisible by stride {s}",
                    self.image_size
                ));
            }
        }
        Ok(())
    }

    pub fn level_shapes(&self) -> Vec<GridShape> {
        self.level_strides
            .iter()
            .map(|&s| GridShape {
                height: self.image_size / s,
                width: self.image_size / s,
            })
            .collect()
    }

    /// Memory points per image.
    pub fn tokens_per_image(&self) -> usize {
        self.level_shapes().iter().map(GridShape::cells).sum()
    }
}
