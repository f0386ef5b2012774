//! Central finite-difference checking of [`Graph`] gradients.

use crate::autograd::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Step used by the acceptance checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
        }
    }
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences with respect to every element of `inputs`.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars);
        g.value(root).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}

/// Like [`check`], but differentiates with respect to every trainable
/// parameter of `store`. `f` must build the scalar from `store` alone.
pub fn check_params<F>(store: &mut ParamStore, step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let root = f(&mut g, store);
    let grads = g.backward(root);
    let analytic = g.param_grads(&grads, store);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        for j in 0..store.value(id).len() {
            let eval = |store: &ParamStore| {
                let mut g = Graph::no_grad();
                let root = f(&mut g, store);
                g.value(root).item()
            };
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + step;
            let up = eval(store);
            store.value_mut(id).data_mut()[j] = orig - step;
            let down = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |t| t.data()[j]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
