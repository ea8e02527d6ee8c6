//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::tensor::Parameterized;

/// Absolute floor on the relative-error denominator so entries whose true
/// gradient is ~0 are judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_key: String,
    /// Largest relative error per tensor key.
    pub per_tensor: BTreeMap<String, f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradients written by `backward` against central differences
/// of `loss` with step `eps`, for every entry of every parameter tensor.
pub fn check_gradients<M, L, B>(model: &mut M, loss: L, backward: B, eps: f64) -> GradCheckReport
where
    M: Parameterized,
    L: Fn(&M) -> f64,
    B: FnOnce(&mut M),
{
    check_gradients_sampled(model, loss, backward, eps, usize::MAX)
}

/// Like [`check_gradients`] but checks at most `per_tensor` evenly spaced
/// entries of each tensor.
pub fn check_gradients_sampled<M, L, B>(
    model: &mut M,
    loss: L,
    backward: B,
    eps: f64,
    per_tensor: usize,
) -> GradCheckReport
where
    M: Parameterized,
    L: Fn(&M) -> f64,
    B: FnOnce(&mut M),
{
    model.zero_grads();
    backward(model);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| analytic.push((p.key.clone(), p.grad.as_slice().to_vec())));

    let mut report = GradCheckReport::default();
    for (t, (key, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let stride = if n > per_tensor {
            n.div_ceil(per_tensor)
        } else {
            1
        };
        let mut worst = 0.0f64;
        for e in (0..n).step_by(stride) {
            let original = param_entry(model, t, e);
            set_param_entry(model, t, e, original + eps);
            let plus = loss(model);
            set_param_entry(model, t, e, original - eps);
            let minus = loss(model);
            set_param_entry(model, t, e, original);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grads[e], numeric);
            worst = worst.max(err);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_key = format!("{key}[{e}]");
            }
        }
        report.per_tensor.insert(key.clone(), worst);
    }
    report
}

fn param_entry<M: Parameterized>(model: &M, tensor: usize, entry: usize) -> f64 {
    let mut idx = 0;
    let mut out = 0.0;
    model.visit_params(&mut |p| {
        if idx == tensor {
            out = p.value.as_slice()[entry];
        }
        idx += 1;
    });
    out
}

fn set_param_entry<M: Parameterized>(model: &mut M, tensor: usize, entry: usize, value: f64) {
    let mut idx = 0;
    model.visit_params_mut(&mut |p| {
        if idx == tensor {
            p.value.as_mut_slice()[entry] = value;
        }
        idx += 1;
    });
}
