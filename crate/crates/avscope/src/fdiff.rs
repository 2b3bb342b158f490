//! Central finite differences over a parameter store.
//!
//! The numeric gradient here is the reference every analytic gradient is
//! judged against, so it deliberately knows nothing about the tape: it only
//! perturbs stored parameter values and re-runs a closure.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::AxisTaggedTensor;

/// Numeric gradient of `f` with respect to every scalar in `store`, by
/// central differences with step `h`. `f` must be deterministic.
pub fn finite_difference_gradient(
    f: impl Fn(&ParameterStore) -> f64,
    store: &ParameterStore,
    h: f64,
) -> Result<BTreeMap<String, AxisTaggedTensor>> {
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let base = store.get(&name)?.clone();
        let mut grad = base.map(|_| 0.0);
        for i in 0..base.numel() {
            let mut plus = store.clone();
            plus.get_mut(&name)?.data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(&name)?.data_mut()[i] -= h;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Relative error between two gradients with an absolute floor:
/// `|a - b| / max(|a|, |b|, floor)`. Returns the fraction of entries within
/// `rtol` and the worst relative error observed.
pub fn agreement(a: &AxisTaggedTensor, b: &AxisTaggedTensor, rtol: f64, floor: f64) -> (f64, f64) {
    assert_eq!(a.numel(), b.numel(), "gradient size mismatch");
    let mut ok = 0usize;
    let mut worst = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
        if rel <= rtol {
            ok += 1;
        }
        worst = worst.max(rel);
    }
    (ok as f64 / a.numel() as f64, worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_linear_gradient() {
        let mut store = ParameterStore::new(0);
        store.ensure_const("x", &[3], 0.0).unwrap();
        store.get_mut("x").unwrap().data_mut().copy_from_slice(&[1.0, -2.0, 0.5]);
        // f = sum(x^2) so df/dx = 2x.
        let grads = finite_difference_gradient(
            |s| s.get("x").unwrap().data().iter().map(|v| v * v).sum(),
            &store,
            1e-5,
        )
        .unwrap();
        let g = grads.get("x").unwrap().data();
        for (gv, want) in g.iter().zip([2.0, -4.0, 1.0]) {
            assert!((gv - want).abs() < 1e-8, "finite diff {gv} vs exact {want}");
        }
    }

    #[test]
    fn agreement_flags_mismatches() {
        let a = AxisTaggedTensor::from_vec(&[(crate::axis::AxisRole::Time, 2)], vec![1.0, 1.0]).unwrap();
        let b = AxisTaggedTensor::from_vec(&[(crate::axis::AxisRole::Time, 2)], vec![1.0, 2.0]).unwrap();
        let (frac, worst) = agreement(&a, &b, 1e-4, 1e-4);
        assert!((frac - 0.5).abs() < 1e-12, "expected half the entries to agree");
        assert!(worst > 0.4, "worst error should reflect the bad entry");
    }
}
