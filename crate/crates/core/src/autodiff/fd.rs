//! Central finite differences, used as an independent gradient oracle.

use ndarray::Array2;

use crate::error::Result;

/// Estimates the gradient of a scalar function at `x` entry by entry with
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(f: F, x: &Array2<f64>, step: f64) -> Result<Array2<f64>>
where
    F: Fn(&Array2<f64>) -> Result<f64>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = f(&probe)?;
        probe[idx] = orig - step;
        let down = f(&probe)?;
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}
