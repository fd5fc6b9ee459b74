//! Central finite differences for gradient verification.
//!
//! These helpers evaluate a scalar loss while perturbing one tensor element
//! at a time. They exist so the analytic gradients of the tape can be
//! checked against an estimate that never touches the backward pass.

use crate::autograd::{Real, Tensor};

/// Central-difference estimate of d(loss)/d(inputs[which][elem]).
///
/// `loss` must recompute the full forward pass from `inputs` on every call;
/// the perturbed element is restored before returning.
pub fn central_diff<F, L>(inputs: &mut [Tensor<F>], which: usize, elem: usize, h: f64, mut loss: L) -> f64
where
    F: Real,
    L: FnMut(&[Tensor<F>]) -> f64,
{
    let orig = inputs[which].data()[elem];
    let hf = F::from(h).unwrap();
    inputs[which].data_mut()[elem] = orig + hf;
    let up = loss(inputs);
    inputs[which].data_mut()[elem] = orig - hf;
    let down = loss(inputs);
    inputs[which].data_mut()[elem] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error between an analytic and a numeric derivative.
///
/// Central differences at `h = 1e-5` in `f64` carry an absolute noise floor
/// around `1e-10`; differences below `1e-8` are treated as agreement so
/// that near-zero gradients are not judged by a ratio the estimator cannot
/// resolve. A genuinely wrong gradient deviates at the scale of the
/// gradient itself and is still caught.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-8 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}
