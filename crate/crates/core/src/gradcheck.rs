//! Central finite differences: the gradient oracle for everything on the tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Estimates `∂f/∂θ` for every trainable parameter by
/// `(f(θ+εe) − f(θ−εe)) / 2ε`, one coordinate at a time.
///
/// `store` is restored bit-exactly before returning.
pub fn finite_diff_grad<F>(
    mut f: F,
    store: &mut ParamStore,
    epsilon: f64,
) -> Result<BTreeMap<ParamId, Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut out = BTreeMap::new();
    for id in store.trainable_ids() {
        let n = store.value(id).len();
        let mut g = store.value(id).clone();
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + epsilon;
            let plus = f(store);
            store.value_mut(id).data_mut()[k] = orig - epsilon;
            let minus = f(store);
            store.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("f at {}[{k}]", store.name(id))));
            }
            g.data_mut()[k] = (plus - minus) / (2.0 * epsilon);
        }
        out.insert(id, g);
    }
    Ok(out)
}

/// Worst coordinate of one parameter in a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradDiff {
    pub path: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true gradient is zero from turning
/// finite-difference roundoff (about 1e-11 at ε = 1e-5) into a large ratio.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Compares analytic gradients held in `store` (absent = zero) against a
/// finite-difference estimate.
pub fn compare(store: &ParamStore, numeric: &BTreeMap<ParamId, Tensor>) -> Vec<GradDiff> {
    numeric
        .iter()
        .map(|(&id, num)| {
            let zeros = Tensor::zeros(num.rows(), num.cols());
            let ana = store.grad(id).unwrap_or(&zeros);
            let mut worst_rel: f64 = 0.0;
            let mut worst_abs: f64 = 0.0;
            for (&a, &n) in ana.data().iter().zip(num.data()) {
                worst_rel = worst_rel.max(rel_err(a, n, REL_ERR_FLOOR));
                worst_abs = worst_abs.max((a - n).abs());
            }
            GradDiff {
                path: store.name(id).to_string(),
                max_rel_err: worst_rel,
                max_abs_err: worst_abs,
                analytic_norm: ana.frobenius_sq().sqrt(),
            }
        })
        .collect()
}
