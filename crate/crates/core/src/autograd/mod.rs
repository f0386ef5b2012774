//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Graphs are built fresh for every forward pass.

mod attention;
mod loss;

use std::collections::HashMap;
use std::sync::Arc;

pub use attention::{AttentionBlock, AttentionLayout};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    Reshape(Var),
    SineEmbed(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
        probs: Vec<f64>,
    },
    Sum(Var),
    WeightedSqErr {
        student: Var,
        teacher: Tensor,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Vec<usize>,
        weights: Vec<f64>,
        norm: f64,
    },
    KlDiv {
        student: Var,
        teacher_probs: Tensor,
        student_probs: Tensor,
        temperature: f64,
        weights: Vec<f64>,
    },
    L1Rows {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    GiouRows {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: Vec<(Var, u64, ParamId)>,
    param_lookup: HashMap<(u64, ParamId), Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    /// A graph that never tracks gradients (evaluation mode).
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient (when the graph tracks gradients).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.param_lookup.get(&key) {
            return v;
        }
        let needs_grad = self.grad_enabled && store.is_trainable(id);
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((v, store.uid(), id));
        self.param_lookup.insert(key, v);
        v
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.cols(),
            tb.rows(),
            "matmul {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let out = ta.matmul(tb);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1);
        assert_eq!(ta.cols(), tr.cols());
        let mut out = ta.clone();
        let r = tr.row(0);
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd.push(s);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gain).row(0), self.value(bias).row(0));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&ts);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_rows(start, end);
        self.push(out, Op::SliceRows(x, start), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let out = self.value(x).select_rows(&idx);
        self.push(out, Op::GatherRows(x, idx), &[x])
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x).clone().reshape(rows, cols);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Sinusoidal embedding of every column of `x` (values expected in
    /// `[0, 1]`), `feats` features per column laid out as `sin | cos` pairs.
    pub fn sine_embed(&mut self, x: Var, feats: usize) -> Var {
        assert!(feats % 2 == 0 && feats > 0, "sine_embed needs an even width");
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        let freqs = sine_frequencies(feats);
        let mut out = Tensor::zeros(rows, cols * feats);
        for r in 0..rows {
            let src = tx.row(r);
            let dst = out.row_mut(r);
            for (c, &v) in src.iter().enumerate() {
                for (i, f) in freqs.iter().enumerate() {
                    dst[c * feats + 2 * i] = (v * f).sin();
                    dst[c * feats + 2 * i + 1] = (v * f).cos();
                }
            }
        }
        self.push(out, Op::SineEmbed(x, feats), &[x])
    }

    /// Multi-head scaled dot-product attention over the blocks of `layout`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
    ) -> Var {
        let (out, probs) =
            attention::forward(self.value(q), self.value(k), self.value(v), heads, &layout);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Softmax attention weights recorded by an attention node, laid out as
    /// `[block][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], &AttentionLayout, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs,
                layout,
                heads,
                ..
            } => Some((probs, layout, *heads)),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Sum of 1x1 scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = match terms.first() {
            Some(&t) => t,
            None => return self.constant(Tensor::scalar(0.0)),
        };
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// `sum_r weights[r] * sum_c (teacher - student)^2`.
    pub fn weighted_sq_err(&mut self, student: Var, teacher: Tensor, weights: Vec<f64>) -> Var {
        let out = loss::weighted_sq_err(self.value(student), &teacher, &weights);
        self.push(
            Tensor::scalar(out),
            Op::WeightedSqErr {
                student,
                teacher,
                weights,
            },
            &[student],
        )
    }

    /// Weighted mean softmax cross-entropy:
    /// `sum_r w_r * -log softmax(logits_r)[t_r] / sum_r w_r`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let (value, probs, norm) = loss::cross_entropy(self.value(logits), &targets, &weights);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
                norm,
            },
            &[logits],
        )
    }

    /// `sum_r w_r * T^2 * KL(softmax(teacher_r / T) || softmax(student_r / T))`.
    pub fn kl_div(
        &mut self,
        student: Var,
        teacher_logits: &Tensor,
        temperature: f64,
        weights: Vec<f64>,
    ) -> Var {
        let (value, teacher_probs, student_probs) =
            loss::kl_div(self.value(student), teacher_logits, temperature, &weights);
        self.push(
            Tensor::scalar(value),
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                temperature,
                weights,
            },
            &[student],
        )
    }

    /// `sum_r w_r * sum_c |pred - target|`.
    pub fn l1_rows(&mut self, pred: Var, target: Tensor, weights: Vec<f64>) -> Var {
        let value = loss::l1_rows(self.value(pred), &target, &weights);
        self.push(
            Tensor::scalar(value),
            Op::L1Rows {
                pred,
                target,
                weights,
            },
            &[pred],
        )
    }

    /// `sum_r w_r * (1 - GIoU(pred_r, target_r))` over center-form boxes.
    pub fn giou_rows(&mut self, pred: Var, target: Tensor, weights: Vec<f64>) -> Var {
        let value = loss::giou_rows(self.value(pred), &target, &weights);
        self.push(
            Tensor::scalar(value),
            Op::GiouRows {
                pred,
                target,
                weights,
            },
            &[pred],
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.nodes[v.0].value.shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().expect("initialized above"));
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accum(grads, *a, |da| {
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::normal(g.data(), n),
                        MatRef::transposed(tb.data(), n),
                        da.data_mut(),
                        true,
                    )
                });
                self.accum(grads, *b, |db| {
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(ta.data(), k),
                        MatRef::normal(g.data(), n),
                        db.data_mut(),
                        true,
                    )
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| d.add_assign(g));
                self.accum(grads, *b, |d| d.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| d.add_assign(g));
                self.accum(grads, *b, |d| {
                    for (x, y) in d.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |d| {
                    for ((x, gy), bv) in d.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gy * bv;
                    }
                });
                self.accum(grads, *b, |d| {
                    for ((x, gy), av) in d.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, |d| d.add_assign(g));
                self.accum(grads, *row, |d| {
                    let dr = d.row_mut(0);
                    for r in 0..g.rows() {
                        for (x, gy) in dr.iter_mut().zip(g.row(r)) {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, |d| {
                    for (x, gy) in d.data_mut().iter_mut().zip(g.data()) {
                        *x += s * gy;
                    }
                });
            }
            Op::Relu(a) => {
                let y = &node.value;
                self.accum(grads, *a, |d| {
                    for ((x, gy), yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        if *yv > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum(grads, *a, |d| {
                    for ((x, gy), yv) in d.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gy * yv * (1.0 - yv);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).row(0);
                self.accum(grads, *gain, |d| {
                    let dr = d.row_mut(0);
                    for r in 0..rows {
                        for ((o, gy), xh) in dr.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gy * xh;
                        }
                    }
                });
                self.accum(grads, *bias, |d| {
                    let dr = d.row_mut(0);
                    for r in 0..rows {
                        for (o, gy) in dr.iter_mut().zip(g.row(r)) {
                            *o += gy;
                        }
                    }
                });
                self.accum(grads, *x, |d| {
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xr[c];
                        }
                        let s = rstd[r] / n;
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o += s * (n * dxhat[c] - s1 - xr[c] * s2);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    self.accum(grads, *p, |d| {
                        let cols = d.cols();
                        for (x, gy) in d
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[start * cols..(start + n) * cols])
                        {
                            *x += gy;
                        }
                    });
                    start += n;
                }
            }
            Op::SliceRows(x, start) => {
                self.accum(grads, *x, |d| {
                    let cols = d.cols();
                    for (xv, gy) in d.data_mut()[start * cols..].iter_mut().zip(g.data()) {
                        *xv += gy;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                self.accum(grads, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (xv, gy) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                            *xv += gy;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |d| {
                    for (xv, gy) in d.data_mut().iter_mut().zip(g.data()) {
                        *xv += gy;
                    }
                });
            }
            Op::SineEmbed(x, feats) => {
                let tx = self.value(*x);
                let freqs = sine_frequencies(*feats);
                self.accum(grads, *x, |d| {
                    for r in 0..tx.rows() {
                        let gr = g.row(r);
                        for (c, &v) in tx.row(r).iter().enumerate() {
                            let mut acc = 0.0;
                            for (i, f) in freqs.iter().enumerate() {
                                acc += gr[c * feats + 2 * i] * f * (v * f).cos();
                                acc -= gr[c * feats + 2 * i + 1] * f * (v * f).sin();
                            }
                            d.row_mut(r)[c] += acc;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let need = [self.needs_grad(*q), self.needs_grad(*k), self.needs_grad(*v)];
                let (dq, dk, dv) =
                    attention::backward(tq, tk, tv, *heads, layout, probs, g, need);
                if let Some(dq) = dq {
                    self.accum(grads, *q, |d| d.add_assign(&dq));
                }
                if let Some(dk) = dk {
                    self.accum(grads, *k, |d| d.add_assign(&dk));
                }
                if let Some(dv) = dv {
                    self.accum(grads, *v, |d| d.add_assign(&dv));
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accum(grads, *x, |d| d.data_mut().iter_mut().for_each(|v| *v += s));
            }
            Op::WeightedSqErr {
                student,
                teacher,
                weights,
            } => {
                let s = g.item();
                let ts = self.value(*student);
                self.accum(grads, *student, |d| {
                    loss::weighted_sq_err_grad(ts, teacher, weights, s, d)
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
                norm,
            } => {
                let s = g.item();
                self.accum(grads, *logits, |d| {
                    loss::cross_entropy_grad(probs, targets, weights, *norm, s, d)
                });
            }
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
                temperature,
                weights,
            } => {
                let s = g.item();
                self.accum(grads, *student, |d| {
                    loss::kl_div_grad(teacher_probs, student_probs, *temperature, weights, s, d)
                });
            }
            Op::L1Rows {
                pred,
                target,
                weights,
            } => {
                let s = g.item();
                let tp = self.value(*pred);
                self.accum(grads, *pred, |d| loss::l1_rows_grad(tp, target, weights, s, d));
            }
            Op::GiouRows {
                pred,
                target,
                weights,
            } => {
                let s = g.item();
                let tp = self.value(*pred);
                self.accum(grads, *pred, |d| loss::giou_rows_grad(tp, target, weights, s, d));
            }
        }
    }

    /// Gradients of every parameter of `store` touched by this graph,
    /// indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for &(v, uid, id) in &self.params {
            if uid == store.uid() {
                if let Some(t) = grads.get(v) {
                    out[id.index()] = Some(t.clone());
                }
            }
        }
        out
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of `p`, with `p` clamped away from 0 and 1.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

fn sine_frequencies(feats: usize) -> Vec<f64> {
    let half = feats / 2;
    (0..half)
        .map(|i| 2.0 * std::f64::consts::PI / 10000f64.powf(2.0 * i as f64 / feats as f64))
        .collect()
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), temperature);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
