use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    select_detections, BackboneFeatures, Detection, DetectorConfig, Memory, StagePredictions,
};
use crate::autograd::{inverse_sigmoid, AttentionBlock, AttentionLayout, Graph, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::nn::{normal, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Anchor side length for the initial query grid.
const ANCHOR_SIDE: f64 = 0.25;

#[derive(Debug, Clone)]
struct AttnProj {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttnProj {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        AttnProj {
            q: Linear::new(ps, rng, &format!("{name}.q"), d, d),
            k: Linear::new(ps, rng, &format!("{name}.k"), d, d),
            v: Linear::new(ps, rng, &format!("{name}.v"), d, d),
            o: Linear::new(ps, rng, &format!("{name}.o"), d, d),
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: AttnProj,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: AttnProj,
    norm_cross: LayerNorm,
    cross_attn: AttnProj,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

/// Parameter handles; values live in [`Detector::params`].
#[derive(Debug, Clone)]
struct Layers {
    patch_embed: Mlp,
    merges: Vec<Linear>,
    input_proj: Vec<Linear>,
    level_embed: Vec<crate::nn::ParamId>,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    query_content: crate::nn::ParamId,
    query_anchor: crate::nn::ParamId,
    pos_head: Mlp,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    class_head: Linear,
    box_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    layers: Layers,
    /// Fixed sine encoding of one image's memory rows, `P x D`.
    pos: Arc<Tensor>,
}

/// Frozen decoder queries appended after the regular queries of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraQueries {
    /// `G x D` content vectors.
    pub content: Tensor,
    /// `G x 4` center-form reference boxes.
    pub ref_boxes: Tensor,
    /// Self-attention group of every query.
    pub groups: Vec<usize>,
}

impl ExtraQueries {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Encoder outputs for a batch; rows are image-major.
pub struct EncodedBatch {
    pub batch: usize,
    /// Per-level backbone maps, `B*H_l*W_l x C`.
    pub features: Vec<Var>,
    /// `B*P x D`.
    pub memory: Var,
    /// Positional encoding tiled over the batch, `B*P x D`.
    pub pos: Var,
    /// Self-attention node of every encoder layer.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuerySpan {
    pub start: usize,
    pub regular: usize,
    pub extra: usize,
}

impl QuerySpan {
    pub fn regular_rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.regular
    }

    pub fn extra_rows(&self) -> std::ops::Range<usize> {
        self.start + self.regular..self.start + self.regular + self.extra
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    /// `rows x (C + 1)`.
    pub logits: Var,
    /// `rows x 4`, center form in `(0, 1)`.
    pub boxes: Var,
}

pub struct DecodedBatch {
    pub stages: Vec<StageVars>,
    pub spans: Vec<QuerySpan>,
}

impl DecodedBatch {
    /// Materializes the predictions of image `b`, rows `range` of its span.
    pub fn predictions(
        &self,
        g: &Graph,
        rows: std::ops::Range<usize>,
    ) -> StagePredictions {
        StagePredictions {
            class_logits: self
                .stages
                .iter()
                .map(|s| g.value(s.logits).slice_rows(rows.start, rows.end))
                .collect(),
            boxes: self
                .stages
                .iter()
                .map(|s| g.value(s.boxes).slice_rows(rows.start, rows.end))
                .collect(),
        }
    }
}

/// Fixed 2D sine encoding of every cell center, levels concatenated.
fn positional_encoding(shapes: &[GridShape], d: usize) -> Tensor {
    let mut coords = Vec::new();
    for s in shapes {
        for r in 0..s.height {
            for c in 0..s.width {
                coords.push((r as f64 + 0.5) / s.height as f64);
                coords.push((c as f64 + 0.5) / s.width as f64);
            }
        }
    }
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::from_vec(coords.len() / 2, 2, coords));
    let e = g.sine_embed(x, d / 2);
    g.value(e).clone()
}

fn block_layout(q_lens: &[usize], k_lens: &[usize], masks: Vec<Option<Vec<bool>>>) -> AttentionLayout {
    let mut blocks = Vec::with_capacity(q_lens.len());
    let (mut qs, mut ks) = (0, 0);
    for ((&q_len, &k_len), mask) in q_lens.iter().zip(k_lens).zip(masks) {
        blocks.push(AttentionBlock {
            q_start: qs,
            q_len,
            k_start: ks,
            k_len,
            mask,
        });
        qs += q_len;
        ks += k_len;
    }
    AttentionLayout { blocks }
}

/// Self-attention mask for `regular` learnable queries followed by grouped
/// extra queries: regular queries see only each other; extra queries see the
/// regular queries and their own group.
pub(crate) fn group_mask(regular: usize, groups: &[usize]) -> Vec<bool> {
    let n = regular + groups.len();
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = if i < regular {
                j < regular
            } else {
                j < regular || groups[i - regular] == groups[j - regular]
            };
        }
    }
    m
}

impl Detector {
    /// Builds a freshly initialized detector.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Detector> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = config.embed_dim;
        let ch = config.backbone_channels;
        let s0 = config.level_strides[0];
        let levels = config.level_strides.len();

        let patch_embed = Mlp::new(&mut ps, &mut rng, "backbone.patch", &[s0 * s0 * 3, ch, ch]);
        let merges = (1..levels)
            .map(|l| Linear::new(&mut ps, &mut rng, &format!("backbone.merge{l}"), 4 * ch, ch))
            .collect();
        let input_proj = (0..levels)
            .map(|l| Linear::new(&mut ps, &mut rng, &format!("input_proj{l}"), ch, d))
            .collect();
        let level_embed = (0..levels)
            .map(|l| ps.add(format!("level_embed{l}"), normal(&mut rng, 1, d, 0.1), true))
            .collect();
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("encoder{i}");
                EncoderLayer {
                    norm_attn: LayerNorm::new(&mut ps, &format!("{n}.norm_attn"), d),
                    attn: AttnProj::new(&mut ps, &mut rng, &format!("{n}.attn"), d),
                    norm_ffn: LayerNorm::new(&mut ps, &format!("{n}.norm_ffn"), d),
                    ffn: Mlp::new(&mut ps, &mut rng, &format!("{n}.ffn"), &[d, config.mlp_hidden, d]),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut ps, "encoder.norm", d);

        let n = config.num_object_queries;
        let query_content = ps.add("query.content", normal(&mut rng, n, d, 1.0), true);
        let side = (n as f64).sqrt().ceil() as usize;
        let mut anchors = Tensor::zeros(n, 4);
        for i in 0..n {
            let cx = ((i % side) as f64 + 0.5) / side as f64;
            let cy = ((i / side) as f64 + 0.5) / side as f64;
            for (c, v) in [cx, cy, ANCHOR_SIDE, ANCHOR_SIDE].into_iter().enumerate() {
                anchors.set(i, c, inverse_sigmoid(v));
            }
        }
        let query_anchor = ps.add("query.anchor", anchors, true);
        let pos_head = Mlp::new(&mut ps, &mut rng, "decoder.pos_head", &[d, d, d]);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("decoder{i}");
                DecoderLayer {
                    norm_self: LayerNorm::new(&mut ps, &format!("{n}.norm_self"), d),
                    self_attn: AttnProj::new(&mut ps, &mut rng, &format!("{n}.self_attn"), d),
                    norm_cross: LayerNorm::new(&mut ps, &format!("{n}.norm_cross"), d),
                    cross_attn: AttnProj::new(&mut ps, &mut rng, &format!("{n}.cross_attn"), d),
                    norm_ffn: LayerNorm::new(&mut ps, &format!("{n}.norm_ffn"), d),
                    ffn: Mlp::new(&mut ps, &mut rng, &format!("{n}.ffn"), &[d, config.mlp_hidden, d]),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut ps, "decoder.norm", d);
        let class_head = Linear::new(&mut ps, &mut rng, "head.class", d, config.num_classes + 1);
        let box_head = Mlp::new(&mut ps, &mut rng, "head.box", &[d, d, 4]);
        // boxes start exactly at their reference anchors
        let last = box_head.layers[box_head.layers.len() - 1];
        ps.value_mut(last.weight).scale_inplace(0.0);

        let pos = Arc::new(positional_encoding(&config.level_shapes(), d));
        Ok(Detector {
            config,
            params: ps,
            layers: Layers {
                patch_embed,
                merges,
                input_proj,
                level_embed,
                encoder,
                encoder_norm,
                query_content,
                query_anchor,
                pos_head,
                decoder,
                decoder_norm,
                class_head,
                box_head,
            },
            pos,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.config.decoder_layers
    }

    pub fn positional_encoding(&self) -> &Tensor {
        &self.pos
    }

    /// Learnable query contents (`N x D`) and their center-form anchors.
    pub fn regular_queries(&self) -> (Tensor, Tensor) {
        let anchors = self
            .params
            .value(self.layers.query_anchor)
            .map(crate::autograd::sigmoid);
        (self.params.value(self.layers.query_content).clone(), anchors)
    }

    fn patchify(&self, images: &[&Image]) -> Result<Tensor> {
        let size = self.config.image_size;
        let s = self.config.level_strides[0];
        let cells = size / s;
        let width = s * s * 3;
        let mut out = Tensor::zeros(images.len() * cells * cells, width);
        for (b, img) in images.iter().enumerate() {
            if img.height() != size || img.width() != size {
                return Err(Error::Shape(format!(
                    "image is {}x{}, detector expects {size}x{size}",
                    img.height(),
                    img.width()
                )));
            }
            let data = img.data();
            for r in 0..cells {
                for c in 0..cells {
                    let row = out.row_mut((b * cells + r) * cells + c);
                    for dy in 0..s {
                        let src = ((r * s + dy) * size + c * s) * 3;
                        let dst = dy * s * 3;
                        for (o, v) in row[dst..dst + s * 3].iter_mut().zip(&data[src..src + s * 3]) {
                            *o = v - 0.5;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Runs backbone and encoder over a batch of images.
    pub fn encode_batch(&self, g: &mut Graph, images: &[&Image]) -> Result<EncodedBatch> {
        self.encode_batch_with(g, &self.params, images)
    }

    /// [`Detector::encode_batch`] with parameter values taken from `ps`,
    /// which must share this detector's layout.
    pub fn encode_batch_with(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        images: &[&Image],
    ) -> Result<EncodedBatch> {
        let l = &self.layers;
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let shapes = self.config.level_shapes();
        let patches = g.constant(self.patchify(images)?);
        let mut feat = l.patch_embed.forward(g, ps, patches);
        feat = g.relu(feat);
        let mut features = vec![feat];
        for (lvl, merge) in l.merges.iter().enumerate() {
            let prev = shapes[lvl];
            let cur = shapes[lvl + 1];
            let mut idx = Vec::with_capacity(4 * batch * cur.cells());
            for b in 0..batch {
                for r in 0..cur.height {
                    for c in 0..cur.width {
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            idx.push(b * prev.cells() + (2 * r + dr) * prev.width + 2 * c + dc);
                        }
                    }
                }
            }
            let gathered = g.gather_rows(feat, Arc::new(idx));
            let stacked = g.reshape(gathered, batch * cur.cells(), 4 * self.config.backbone_channels);
            let merged = merge.forward(g, ps, stacked);
            feat = g.relu(merged);
            features.push(feat);
        }

        let mut projected = Vec::with_capacity(shapes.len());
        for (lvl, f) in features.iter().enumerate() {
            let x = l.input_proj[lvl].forward(g, ps, *f);
            let e = g.param(ps, l.level_embed[lvl]);
            projected.push(g.add_row(x, e));
        }
        // level-major concatenation, reordered to image-major rows
        let per_image = self.config.tokens_per_image();
        let mut order = Vec::with_capacity(batch * per_image);
        for b in 0..batch {
            let mut level_base = 0;
            for s in &shapes {
                for p in 0..s.cells() {
                    order.push(level_base + b * s.cells() + p);
                }
                level_base += batch * s.cells();
            }
        }
        let cat = g.concat_rows(&projected);
        let tokens = g.gather_rows(cat, Arc::new(order));

        let pos_rows: Vec<&Tensor> = (0..batch).map(|_| &*self.pos).collect();
        let pos = g.constant(Tensor::concat_rows(&pos_rows));
        let lens = vec![per_image; batch];
        let layout = Arc::new(block_layout(&lens, &lens, vec![None; batch]));
        let heads = self.config.attention_heads;

        let mut x = g.add(tokens, pos);
        let mut attention = Vec::with_capacity(l.encoder.len());
        for layer in &l.encoder {
            let t = layer.norm_attn.forward(g, ps, x);
            let qk = g.add(t, pos);
            let q = layer.attn.q.forward(g, ps, qk);
            let k = layer.attn.k.forward(g, ps, qk);
            let v = layer.attn.v.forward(g, ps, t);
            let a = g.attention(q, k, v, heads, layout.clone());
            attention.push(a);
            let o = layer.attn.o.forward(g, ps, a);
            x = g.add(x, o);
            let t = layer.norm_ffn.forward(g, ps, x);
            let f = layer.ffn.forward(g, ps, t);
            x = g.add(x, f);
        }
        let memory = l.encoder_norm.forward(g, ps, x);
        Ok(EncodedBatch {
            batch,
            features,
            memory,
            pos,
            attention,
        })
    }

    /// Decodes the regular queries of every image plus the optional extra
    /// queries given per image (`extras` is empty or has one entry per image).
    pub fn decode_batch(
        &self,
        g: &mut Graph,
        enc: &EncodedBatch,
        extras: &[ExtraQueries],
    ) -> Result<DecodedBatch> {
        self.decode_batch_with(g, &self.params, enc, extras)
    }

    pub fn decode_batch_with(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        enc: &EncodedBatch,
        extras: &[ExtraQueries],
    ) -> Result<DecodedBatch> {
        let d = self.config.embed_dim;
        let n = self.config.num_object_queries;
        if !extras.is_empty() && extras.len() != enc.batch {
            return Err(Error::Shape(format!(
                "{} extra query sets for a batch of {}",
                extras.len(),
                enc.batch
            )));
        }
        let content = g.param(ps, self.layers.query_content);
        let anchor = g.param(ps, self.layers.query_anchor);
        let mut contents = Vec::new();
        let mut refs = Vec::new();
        let mut spans = Vec::with_capacity(enc.batch);
        let mut q_lens = Vec::with_capacity(enc.batch);
        let mut masks = Vec::with_capacity(enc.batch);
        let mut start = 0;
        for b in 0..enc.batch {
            contents.push(content);
            refs.push(anchor);
            let extra = extras.get(b).filter(|e| !e.is_empty());
            let n_extra = match extra {
                Some(e) => {
                    if e.content.shape() != (e.len(), d) || e.ref_boxes.shape() != (e.len(), 4) {
                        return Err(Error::Shape(format!(
                            "extra queries must be {}x{d} with {}x4 boxes",
                            e.len(),
                            e.len()
                        )));
                    }
                    contents.push(g.constant(e.content.clone()));
                    refs.push(g.constant(e.ref_boxes.map(inverse_sigmoid)));
                    masks.push(Some(group_mask(n, &e.groups)));
                    e.len()
                }
                None => {
                    masks.push(None);
                    0
                }
            };
            spans.push(QuerySpan {
                start,
                regular: n,
                extra: n_extra,
            });
            q_lens.push(n + n_extra);
            start += n + n_extra;
        }
        let content = g.concat_rows(&contents);
        let ref_logit = g.concat_rows(&refs);
        let self_layout = block_layout(&q_lens, &q_lens, masks);
        let mem_lens = vec![self.config.tokens_per_image(); enc.batch];
        let cross_layout = block_layout(&q_lens, &mem_lens, vec![None; enc.batch]);
        let stages = self.run_decoder(
            g,
            ps,
            enc.memory,
            enc.pos,
            content,
            ref_logit,
            Arc::new(self_layout),
            Arc::new(cross_layout),
        );
        Ok(DecodedBatch { stages, spans })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_decoder(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        memory: Var,
        mem_pos: Var,
        content: Var,
        ref_logit: Var,
        self_layout: Arc<AttentionLayout>,
        cross_layout: Arc<AttentionLayout>,
    ) -> Vec<StageVars> {
        let l = &self.layers;
        let heads = self.config.attention_heads;
        let refs = g.sigmoid(ref_logit);
        let emb = g.sine_embed(refs, self.config.embed_dim / 4);
        let qpos = l.pos_head.forward(g, ps, emb);
        let mem_key = g.add(memory, mem_pos);

        let mut h = content;
        let mut stages = Vec::with_capacity(l.decoder.len());
        for layer in &l.decoder {
            let t = layer.norm_self.forward(g, ps, h);
            let qk = g.add(t, qpos);
            let q = layer.self_attn.q.forward(g, ps, qk);
            let k = layer.self_attn.k.forward(g, ps, qk);
            let v = layer.self_attn.v.forward(g, ps, t);
            let a = g.attention(q, k, v, heads, self_layout.clone());
            let o = layer.self_attn.o.forward(g, ps, a);
            h = g.add(h, o);

            let t = layer.norm_cross.forward(g, ps, h);
            let qc = g.add(t, qpos);
            let q = layer.cross_attn.q.forward(g, ps, qc);
            let k = layer.cross_attn.k.forward(g, ps, mem_key);
            let v = layer.cross_attn.v.forward(g, ps, memory);
            let a = g.attention(q, k, v, heads, cross_layout.clone());
            let o = layer.cross_attn.o.forward(g, ps, a);
            h = g.add(h, o);

            let t = layer.norm_ffn.forward(g, ps, h);
            let f = layer.ffn.forward(g, ps, t);
            h = g.add(h, f);

            let out = l.decoder_norm.forward(g, ps, h);
            let logits = l.class_head.forward(g, ps, out);
            let delta = l.box_head.forward(g, ps, out);
            let z = g.add(delta, ref_logit);
            let boxes = g.sigmoid(z);
            stages.push(StageVars { logits, boxes });
        }
        stages
    }

    /// Backbone features and memory of a single image.
    pub fn encode(&self, image: &Image) -> Result<(BackboneFeatures, Memory)> {
        let mut g = Graph::no_grad();
        let enc = self.encode_batch(&mut g, &[image])?;
        let shapes = self.config.level_shapes();
        Ok((
            BackboneFeatures {
                levels: enc.features.iter().map(|f| g.value(*f).clone()).collect(),
                level_shapes: shapes.clone(),
            },
            Memory {
                values: g.value(enc.memory).clone(),
                level_shapes: shapes,
                positional_encoding: (*self.pos).clone(),
            },
        ))
    }

    /// Decodes arbitrary queries against one image's memory.
    /// `group_mask[i * G + j]` lets query `i` attend to query `j`.
    pub fn decode(
        &self,
        memory: &Memory,
        queries: &Tensor,
        ref_boxes: &Tensor,
        group_mask: &[bool],
    ) -> Result<StagePredictions> {
        let d = self.config.embed_dim;
        let gq = queries.rows();
        if memory.values.shape() != (self.config.tokens_per_image(), d)
            || memory.positional_encoding.shape() != memory.values.shape()
        {
            return Err(Error::Shape(format!(
                "memory is {:?}, detector expects {}x{d}",
                memory.values.shape(),
                self.config.tokens_per_image()
            )));
        }
        if queries.cols() != d || ref_boxes.shape() != (gq, 4) || group_mask.len() != gq * gq {
            return Err(Error::Shape(format!(
                "queries {:?}, boxes {:?}, mask length {} are inconsistent",
                queries.shape(),
                ref_boxes.shape(),
                group_mask.len()
            )));
        }
        let mut g = Graph::no_grad();
        let mem = g.constant(memory.values.clone());
        let pos = g.constant(memory.positional_encoding.clone());
        let content = g.constant(queries.clone());
        let ref_logit = g.constant(ref_boxes.map(inverse_sigmoid));
        let p = memory.values.rows();
        let self_layout = block_layout(&[gq], &[gq], vec![Some(group_mask.to_vec())]);
        let cross_layout = block_layout(&[gq], &[p], vec![None]);
        let stages = self.run_decoder(
            &mut g,
            &self.params,
            mem,
            pos,
            content,
            ref_logit,
            Arc::new(self_layout),
            Arc::new(cross_layout),
        );
        let dec = DecodedBatch {
            stages,
            spans: vec![QuerySpan {
                start: 0,
                regular: gq,
                extra: 0,
            }],
        };
        Ok(dec.predictions(&g, 0..gq))
    }

    /// Final-stage predictions of the regular queries for one image.
    pub fn predict(&self, image: &Image, top_k: usize, score_threshold: f64) -> Result<Vec<Detection>> {
        Ok(self
            .predict_batch(&[image], top_k, score_threshold)?
            .pop()
            .unwrap_or_default())
    }

    pub fn predict_batch(
        &self,
        images: &[&Image],
        top_k: usize,
        score_threshold: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        if self.params.is_empty() {
            return Err(Error::Unloaded);
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::no_grad();
        let enc = self.encode_batch(&mut g, images)?;
        let dec = self.decode_batch(&mut g, &enc, &[])?;
        let last = dec.stages.last().copied().expect("at least one stage");
        Ok(dec
            .spans
            .iter()
            .map(|s| {
                let r = s.regular_rows();
                let logits = g.value(last.logits).slice_rows(r.start, r.end);
                let boxes = g.value(last.boxes).slice_rows(r.start, r.end);
                select_detections(&logits, &boxes, top_k, score_threshold)
            })
            .collect())
    }
}
