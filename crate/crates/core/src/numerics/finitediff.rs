//! Central finite differences, the independent gradient oracle.

use crate::error::Result;
use crate::numerics::tensor::{Precision, Tensor};

/// Central-difference gradient of a scalar function of one tensor, evaluated
/// coordinate by coordinate at 64-bit.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Vec<f64>> {
    let base = x.to_precision(Precision::P64);
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.data().to_vec();
        plus[i] += h;
        let mut minus = base.data().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::new(base.extents().to_vec(), plus, Precision::P64)?)?;
        let fm = f(&Tensor::new(base.extents().to_vec(), minus, Precision::P64)?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Pass/fail comparison per the gradient-check tolerance: absolute floor for
/// near-zero gradients, relative bound otherwise.
pub fn grads_match(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> bool {
    max_mismatch(analytic, numeric, rel_tol, abs_floor).is_none()
}

/// Index and relative error of the worst coordinate that fails the tolerance.
pub fn max_mismatch(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_floor: f64,
) -> Option<(usize, f64)> {
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..analytic.len() {
        let diff = (analytic[i] - numeric[i]).abs();
        if diff <= abs_floor {
            continue;
        }
        let denom = analytic[i].abs().max(numeric[i].abs());
        let rel = diff / denom;
        if rel > rel_tol && worst.map_or(true, |(_, w)| rel > w) {
            worst = Some((i, rel));
        }
    }
    worst
}

/// Largest relative error over all coordinates, with the absolute floor
/// treated as zero error. Used for reporting.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let diff = (analytic[i] - numeric[i]).abs();
        if diff <= abs_floor {
            continue;
        }
        let rel = diff / analytic[i].abs().max(numeric[i].abs());
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::vector(vec![0.3, -1.7, 4.4], Precision::P64).unwrap();
        let grad = finite_diff_grad(&mut |t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for g in grad {
            assert!((g - 1.0).abs() < 1e-9, "got {g}");
        }
    }

    #[test]
    fn square_at_two_gives_four() {
        let x = Tensor::scalar(2.0, Precision::P64).unwrap();
        let grad =
            finite_diff_grad(&mut |t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((grad[0] - 4.0).abs() < 1e-8, "got {}", grad[0]);
    }
}
