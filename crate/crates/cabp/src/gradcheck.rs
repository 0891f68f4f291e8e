//! Central finite-difference gradient checking.
//!
//! These helpers are deliberately independent of the tape and the backward
//! rules: they only nudge inputs and re-run a closure, so they can serve as
//! an oracle for any differentiable path in the crate.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central difference step. With f64 inputs in [-1, 1] this leaves plenty of
/// headroom below the 1e-6 relative tolerance used by the test suites.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Relative difference normalized by `max(|a|, |b|, 1)`: a true relative
/// error wherever entries are of order one or larger, an absolute error
/// below that, where central differences hit their noise floor.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Numerical gradient of `f` with respect to `x`, one central difference per
/// element: `(f(x + h) - f(x - h)) / 2h`.
pub fn numerical_gradient<S: Scalar>(
    x: &Tensor<S>,
    mut f: impl FnMut(&Tensor<S>) -> f64,
    epsilon: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let original = x.data()[i];
        probe.data_mut()[i] = original + S::from_f64_lossy(epsilon);
        let plus = f(&probe);
        probe.data_mut()[i] = original - S::from_f64_lossy(epsilon);
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    grad
}

/// Largest relative error between an analytic gradient and the numerical
/// gradient of `f`.
pub fn max_gradient_error<S: Scalar>(
    x: &Tensor<S>,
    analytic: &Tensor<S>,
    f: impl FnMut(&Tensor<S>) -> f64,
    epsilon: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match input");
    let numeric = numerical_gradient(x, f, epsilon);
    analytic
        .data()
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a.to_f64_lossy(), n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AllocCategory;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum(x^2), df/dx = 2x
        let x = Tensor::from_vec(vec![4], vec![0.3f64, -0.7, 1.1, 0.0], AllocCategory::Scratch);
        let analytic = x.scale(2.0);
        let err = max_gradient_error(
            &x,
            &analytic,
            |t| t.data().iter().map(|v| v * v).sum(),
            DEFAULT_EPSILON,
        );
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_vec(vec![2], vec![0.5f64, -0.25], AllocCategory::Scratch);
        let wrong = x.scale(3.0);
        let err = max_gradient_error(
            &x,
            &wrong,
            |t| t.data().iter().map(|v| v * v).sum(),
            DEFAULT_EPSILON,
        );
        assert!(err > 1e-2);
    }
}
