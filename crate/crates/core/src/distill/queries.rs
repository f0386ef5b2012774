use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DistillConfig;
use crate::detector::ExtraQueries;
use crate::error::{Error, Result};
use crate::geometry::GroundTruthInstance;
use crate::nn::{normal, xavier_uniform};
use crate::tensor::Tensor;

/// Smallest side of a jittered or random box.
const MIN_SIDE: f64 = 0.02;

/// Class embedding table, box MLP and shared random contents. Never
/// trained; two instances built with equal arguments are bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEmbedders {
    /// `C x D`.
    pub class_table: Tensor,
    /// `4 -> D -> D` with ReLU in between.
    pub box_w1: Tensor,
    pub box_b1: Tensor,
    pub box_w2: Tensor,
    pub box_b2: Tensor,
    /// `G x D` contents of the shared random points.
    pub random_table: Tensor,
}

impl FrozenEmbedders {
    pub fn new(num_classes: usize, width: usize, num_points: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("target queries need at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FrozenEmbedders {
            class_table: normal(&mut rng, num_classes, width, 1.0),
            box_w1: xavier_uniform(&mut rng, 4, width),
            box_b1: Tensor::zeros(1, width),
            box_w2: xavier_uniform(&mut rng, width, width),
            box_b2: Tensor::zeros(1, width),
            random_table: normal(&mut rng, num_points, width, 1.0),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.rows()
    }

    pub fn width(&self) -> usize {
        self.class_table.cols()
    }

    /// Box MLP applied to `n x 4` center-form boxes.
    pub fn embed_boxes(&self, boxes: &Tensor) -> Tensor {
        let mut h = boxes.matmul(&self.box_w1);
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(self.box_b1.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut out = h.matmul(&self.box_w2);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(self.box_b2.data()) {
                *v += b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    GroundTruth,
    SharedRandom,
}

/// Where a query's content vector comes from; independent of model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentSource {
    /// Row of the class embedding table.
    Class(usize),
    /// Row of the shared random table.
    Random(usize),
}

/// Ground-truth-derived and padding queries shared by teacher and student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAwareQuerySet {
    pub content: Vec<ContentSource>,
    /// Center-form boxes.
    pub positional_params: Vec<[f64; 4]>,
    pub group_id: Vec<usize>,
    pub copy_index: Vec<usize>,
    pub origin: Vec<QueryOrigin>,
}

impl TargetAwareQuerySet {
    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }

    /// Canonical byte encoding used for consistency checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("query sets always serialize")
    }

    /// Contents `class_or_random + box_mlp(box)` in the embedders' width.
    pub fn materialize(&self, emb: &FrozenEmbedders) -> Result<ExtraQueries> {
        let n = self.len();
        let boxes = Tensor::from_vec(
            n,
            4,
            self.positional_params.iter().flatten().copied().collect(),
        );
        let mut content = emb.embed_boxes(&boxes);
        for (r, src) in self.content.iter().enumerate() {
            let base = match *src {
                ContentSource::Class(c) if c < emb.class_table.rows() => emb.class_table.row(c),
                ContentSource::Random(i) if i < emb.random_table.rows() => emb.random_table.row(i),
                other => {
                    return Err(Error::Config(format!(
                        "query content {other:?} is outside the embedder tables"
                    )))
                }
            };
            for (v, b) in content.row_mut(r).iter_mut().zip(base) {
                *v += b;
            }
        }
        Ok(ExtraQueries {
            content,
            ref_boxes: boxes,
            groups: self.group_id.clone(),
        })
    }
}

/// Errors unless both sets are byte-identical.
pub fn ensure_same_query_set(a: &TargetAwareQuerySet, b: &TargetAwareQuerySet) -> Result<()> {
    if a.to_bytes() == b.to_bytes() {
        Ok(())
    } else {
        Err(Error::QuerySetMismatch(format!(
            "{} vs {} queries differ",
            a.len(),
            b.len()
        )))
    }
}

fn clamp_box(b: [f64; 4]) -> [f64; 4] {
    let w = b[2].clamp(MIN_SIDE, 1.0);
    let h = b[3].clamp(MIN_SIDE, 1.0);
    [b[0].clamp(0.0, 1.0), b[1].clamp(0.0, 1.0), w, h]
}

/// Target-aware queries for one image.
///
/// Copy `k` of every ground truth forms group `k`; padding points, when
/// enabled, fill the remaining slots up to `num_distill_points` and form one
/// further group. If the ground truths do not fit `copies` times, fewer
/// copies are used, never less than one.
pub fn build_target_queries(
    gts: &[GroundTruthInstance],
    emb: &FrozenEmbedders,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TargetAwareQuerySet> {
    if emb.num_classes() == 0 {
        return Err(Error::Config("target queries need at least one class".into()));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= emb.num_classes()) {
        return Err(Error::Config(format!(
            "class {} outside {} embedder classes",
            g.class_id,
            emb.num_classes()
        )));
    }
    let g_max = cfg.num_distill_points;
    let copies = if gts.is_empty() {
        0
    } else {
        cfg.num_copies.min(g_max / gts.len()).max(1)
    };
    if copies < cfg.num_copies && !gts.is_empty() {
        log::warn!(
            "{} ground truths x {} copies exceed {g_max} points; using {copies} copies",
            gts.len(),
            cfg.num_copies
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TargetAwareQuerySet {
        content: Vec::new(),
        positional_params: Vec::new(),
        group_id: Vec::new(),
        copy_index: Vec::new(),
        origin: Vec::new(),
    };
    for k in 0..copies {
        for g in gts {
            let mut b = g.bbox.to_array();
            if cfg.box_jitter > 0.0 {
                let j = cfg.box_jitter;
                b[0] += rng.gen_range(-j..=j) * b[2];
                b[1] += rng.gen_range(-j..=j) * b[3];
                b[2] *= 1.0 + rng.gen_range(-j..=j);
                b[3] *= 1.0 + rng.gen_range(-j..=j);
                b = clamp_box(b);
            }
            set.content.push(ContentSource::Class(g.class_id));
            set.positional_params.push(b);
            set.group_id.push(k);
            set.copy_index.push(k);
            set.origin.push(QueryOrigin::GroundTruth);
        }
    }
    if cfg.include_kddetr_points {
        let padding = g_max.saturating_sub(set.len()).min(emb.random_table.rows());
        for i in 0..padding {
            let b = clamp_box([
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ]);
            set.content.push(ContentSource::Random(i));
            set.positional_params.push(b);
            set.group_id.push(copies);
            set.copy_index.push(0);
            set.origin.push(QueryOrigin::SharedRandom);
        }
    }
    Ok(set)
}
