use crate::tensor::Tensor;

/// One independent attention problem: a contiguous run of query rows that
/// attends over a contiguous run of key rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Row-major `q_len x k_len`; `true` lets query `i` attend to key `j`.
    /// Blocked keys are skipped outright, never just down-weighted.
    pub mask: Option<Vec<bool>>,
}

impl AttentionBlock {
    fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[i * self.k_len + j])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionLayout {
    pub blocks: Vec<AttentionBlock>,
}

impl AttentionLayout {
    /// Offsets of each block's probabilities in the flat probability buffer.
    pub fn prob_offsets(&self, heads: usize) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            offsets.push(acc);
            acc += heads * b.q_len * b.k_len;
        }
        offsets
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(super) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttentionLayout,
) -> (Tensor, Vec<f64>) {
    let d = q.cols();
    assert_eq!(k.cols(), d, "attention query/key width mismatch");
    assert_eq!(v.cols(), d, "attention value width mismatch");
    assert_eq!(k.rows(), v.rows(), "attention key/value count mismatch");
    assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offsets = layout.prob_offsets(heads);
    let total: usize = layout
        .blocks
        .iter()
        .map(|b| heads * b.q_len * b.k_len)
        .sum();
    let mut probs = vec![0.0; total];
    let mut out = Tensor::zeros(q.rows(), d);
    let mut scores = Vec::new();

    for (block, &offset) in layout.blocks.iter().zip(&offsets) {
        let kl = block.k_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..block.q_len {
                let qi = &q.row(block.q_start + i)[cols.clone()];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..kl {
                    if block.allowed(i, j) {
                        let s = dot(qi, &k.row(block.k_start + j)[cols.clone()]) * scale;
                        max = max.max(s);
                        scores.push((j, s));
                    }
                }
                if scores.is_empty() {
                    continue;
                }
                let mut norm = 0.0;
                for (_, s) in scores.iter_mut() {
                    *s = (*s - max).exp();
                    norm += *s;
                }
                let prow = &mut probs[offset + (h * block.q_len + i) * kl..][..kl];
                let orow = &mut out.row_mut(block.q_start + i)[cols.clone()];
                for &(j, e) in &scores {
                    let p = e / norm;
                    prow[j] = p;
                    let vj = &v.row(block.k_start + j)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
#[allow(clippy::type_complexity)]
pub(super) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    layout: &AttentionLayout,
    probs: &[f64],
    grad_out: &Tensor,
    need: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offsets = layout.prob_offsets(heads);
    let mut dq = Tensor::zeros(q.rows(), d);
    let mut dk = Tensor::zeros(k.rows(), d);
    let mut dv = Tensor::zeros(v.rows(), d);
    let mut dp = Vec::new();

    for (block, &offset) in layout.blocks.iter().zip(&offsets) {
        let kl = block.k_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..block.q_len {
                let qrow = block.q_start + i;
                let prow = &probs[offset + (h * block.q_len + i) * kl..][..kl];
                let go = &grad_out.row(qrow)[cols.clone()];
                dp.clear();
                let mut weighted = 0.0;
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 && !block.allowed(i, j) {
                        continue;
                    }
                    let vj = &v.row(block.k_start + j)[cols.clone()];
                    let g = dot(go, vj);
                    weighted += p * g;
                    dp.push((j, p, g));
                    if need[2] {
                        let dvj = &mut dv.row_mut(block.k_start + j)[cols.clone()];
                        for (o, x) in dvj.iter_mut().zip(go) {
                            *o += p * x;
                        }
                    }
                }
                if !(need[0] || need[1]) {
                    continue;
                }
                for &(j, p, g) in &dp {
                    let ds = p * (g - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = block.k_start + j;
                    if need[0] {
                        let kj = &k.row(krow)[cols.clone()];
                        let dqi = &mut dq.row_mut(qrow)[cols.clone()];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                    }
                    if need[1] {
                        let qi = &q.row(qrow)[cols.clone()];
                        let dkj = &mut dk.row_mut(krow)[cols.clone()];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
    }
    (
        need[0].then_some(dq),
        need[1].then_some(dk),
        need[2].then_some(dv),
    )
}
