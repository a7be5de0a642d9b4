//! Central-difference gradient oracle.

use super::value::Tensor;
use crate::error::{Error, Result};

/// Per-coordinate central difference `(f(x+eps) - f(x-eps)) / 2eps`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f+ = {hi}, f- = {lo}"
            )));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out)
}

/// Largest mismatch between analytic and numeric gradients.
///
/// Coordinates where both magnitudes are below `small` are compared absolutely
/// against `abs_tol` and report `0.0` when within it; others report relative error.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, small: f64, abs_tol: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < small {
                if (a - n).abs() <= abs_tol {
                    0.0
                } else {
                    (a - n).abs() / small
                }
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(&[3], vec![0.3, -1.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        assert!(finite_diff_grad(|t| t.data()[0].ln(), &x, 1e-5).is_err());
    }
}
