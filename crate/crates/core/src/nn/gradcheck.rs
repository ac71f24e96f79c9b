//! Central finite differences for checking analytic gradients.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of the backward implementation it is compared against.

use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default perturbation for `f64` central differences.
pub const STEP: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for each requested index.
pub fn numeric_grad(
    x: &Tensor,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Same as [`numeric_grad`] but perturbs one parameter inside a store.
pub fn numeric_grad_param(
    store: &ParamStore,
    id: ParamId,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    let mut probe = store.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Up to `max` evenly spread indices into a buffer of length `n`.
pub fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max + (i * 7919) % (n / max).max(1)).collect()
}
