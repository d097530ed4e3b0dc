//! Central finite-difference gradient checking.

use super::tensor::{Scalar, Tensor};

/// Relative error with the `max(1, |a|, |n|)` denominator.
#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Max relative error between `analytic` and central differences of `f`
/// around `inputs`, perturbing every coordinate.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, inputs: &[f64], analytic: &[f64], h: f64) -> f64 {
    let all: Vec<usize> = (0..inputs.len()).collect();
    grad_check_at(f, inputs, analytic, &all, h)
}

/// As [`grad_check`] but only over the listed coordinates.
pub fn grad_check_at(
    mut f: impl FnMut(&[f64]) -> f64,
    inputs: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    assert_eq!(inputs.len(), analytic.len(), "analytic gradient length");
    let mut x = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// `grad_check` for an op that returns its own analytic gradient.
pub fn grad_check_op(mut op: impl FnMut(&[f64]) -> (f64, Vec<f64>), inputs: &[f64], h: f64) -> f64 {
    let (_, analytic) = op(inputs);
    grad_check(|x| op(x).0, inputs, &analytic, h)
}

/// Scalarises a tensor output as `<y, probe>`; its gradient w.r.t. `y` is `probe`.
pub fn linear_probe<T: Scalar>(y: &Tensor<T>, probe: &Tensor<T>) -> f64 {
    y.dot(probe)
}
