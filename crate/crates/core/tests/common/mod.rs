//! Shared helpers for the integration suites: central finite differences
//! and tolerance comparison. Kept independent of the autodiff path it
//! checks — gradients here come from plain forward evaluations only.

pub mod properties;

use advlab_core::Tensor;

/// Central finite differences of a scalar-valued function at `x`.
pub fn finite_diff(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    grad
}

/// Max relative error between an analytic and a numeric gradient.
/// Entries where both magnitudes sit below `floor` are under the
/// finite-difference noise floor and are skipped.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs());
        if denom < floor {
            continue;
        }
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Elementwise max absolute difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}
