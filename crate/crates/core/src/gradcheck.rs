//! Central finite-difference gradient checking.
//!
//! Independent of the backward pass by construction: only forward
//! evaluations are used. Inputs should stay away from relu kinks for the
//! comparison to be meaningful.

use crate::tensor::Tensor;

/// Maximum relative error between an analytic gradient and the central
/// finite difference (f(x+h) - f(x-h)) / 2h over every coordinate of every
/// parameter.
///
/// `loss_fn` must be a pure function of the parameter list.
pub fn max_relative_error(
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    mut loss_fn: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        assert_eq!(params[pi].shape(), analytic[pi].shape());
        for j in 0..params[pi].numel() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let fp = loss_fn(&work);
            work[pi].data_mut()[j] = orig - h;
            let fm = loss_fn(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let exact = analytic[pi].data()[j];
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            let rel = (numeric - exact).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}
