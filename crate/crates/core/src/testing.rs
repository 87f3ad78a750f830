//! Independent numerical oracles used by the test suites.
//!
//! Nothing here is used by the library itself; the finite-difference
//! routines only ever call the scalar function under test.

use crate::numerics::Matrix;

/// Central finite differences of `f` at `x`, one entry at a time.
pub fn finite_difference(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - step;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
