//! A small DETR-style detector: patch-embedding backbone, transformer
//! encoder producing the memory, DAB-style decoder with box queries and a
//! Hungarian-matched set loss.

mod config;
mod criterion;
mod model;

use serde::{Deserialize, Serialize};

use crate::geometry::{BoundingBox, GridShape};
use crate::tensor::Tensor;

pub use config::{DetectorConfig, LossWeights};
pub use criterion::{detection_loss, DetectionLoss};
pub use model::{DecodedBatch, Detector, EncodedBatch, ExtraQueries, QuerySpan, StageVars};

/// Encoder output for one image: one row per grid cell, levels concatenated
/// in order and each level flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    pub values: Tensor,
    pub level_shapes: Vec<GridShape>,
    pub positional_encoding: Tensor,
}

/// Per-level backbone maps for one image, each `H_l*W_l x C` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneFeatures {
    pub levels: Vec<Tensor>,
    pub level_shapes: Vec<GridShape>,
}

/// Decoder outputs for one image, one entry per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePredictions {
    /// `queries x (C + 1)` per stage; the last column is background.
    pub class_logits: Vec<Tensor>,
    /// `queries x 4` center-form boxes per stage.
    pub boxes: Vec<Tensor>,
}

impl StagePredictions {
    pub fn num_stages(&self) -> usize {
        self.class_logits.len()
    }

    pub fn num_queries(&self) -> usize {
        self.class_logits.first().map_or(0, Tensor::rows)
    }

    /// Rows `start..end` of every stage.
    pub fn slice_queries(&self, start: usize, end: usize) -> StagePredictions {
        StagePredictions {
            class_logits: self
                .class_logits
                .iter()
                .map(|t| t.slice_rows(start, end))
                .collect(),
            boxes: self.boxes.iter().map(|t| t.slice_rows(start, end)).collect(),
        }
    }

    /// Only the final stage.
    pub fn last_stage(&self) -> StagePredictions {
        StagePredictions {
            class_logits: self.class_logits.last().into_iter().cloned().collect(),
            boxes: self.boxes.last().into_iter().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// Top-scoring `(query, class)` pairs from the final stage, without NMS.
/// Scores must exceed `score_threshold`; output is sorted by score.
pub fn select_detections(
    class_logits: &Tensor,
    boxes: &Tensor,
    top_k: usize,
    score_threshold: f64,
) -> Vec<Detection> {
    let probs = crate::autograd::softmax_rows(class_logits, 1.0);
    let fg = class_logits.cols() - 1;
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for q in 0..probs.rows() {
        for c in 0..fg {
            let s = probs.get(q, c);
            if s > score_threshold {
                cands.push((s, q, c));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(top_k);
    cands
        .into_iter()
        .map(|(score, q, c)| {
            let b = boxes.row(q);
            Detection {
                class_id: c,
                score,
                bbox: BoundingBox {
                    cx: b[0].clamp(0.0, 1.0),
                    cy: b[1].clamp(0.0, 1.0),
                    w: b[2].clamp(1e-6, 1.0),
                    h: b[3].clamp(1e-6, 1.0),
                },
            }
        })
        .collect()
}
