//! Central-difference gradient estimation, always in f64. This is the
//! verification oracle for every analytic gradient in the crate.

use crate::error::{Error, Result};
use ndarray::ArrayD;

/// Central-difference gradient of a scalar-valued `f` at `x`:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` per coordinate.
///
/// Errors if any probed function value is non-finite. O(2·numel) evaluations,
/// so callers keep probe tensors small.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    eps: f64,
) -> Result<ArrayD<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("fd step must be finite and > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = ArrayD::zeros(x.raw_dim());
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice_mut().expect("probe is standard layout")[i];

        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "fd probe at flat index {i}: f(+)={plus}, f(-)={minus}"
            )));
        }
        grad.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Guarded relative error between an analytic value and a reference.
///
/// The 0.01 denominator floor turns the comparison into a 1e-6 absolute
/// tolerance for near-zero coordinates when checked against 1e-4, which is
/// the noise floor of central differences at eps = 1e-3 in f64.
pub fn rel_error(analytic: f64, reference: f64) -> f64 {
    let denom = analytic.abs().max(reference.abs()).max(0.01);
    (analytic - reference).abs() / denom
}

/// Coordinate-wise worst [`rel_error`] between two same-shape arrays.
pub fn max_rel_error(analytic: &ArrayD<f64>, reference: &ArrayD<f64>) -> f64 {
    debug_assert_eq!(analytic.shape(), reference.shape());
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(&a, &r)| rel_error(a, r))
        .fold(0.0, f64::max)
}

/// Outcome of one analytic-vs-finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

impl GradReport {
    pub fn compare(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> GradReport {
        assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
        let mut worst = 0.0f64;
        let mut worst_index = 0usize;
        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let e = rel_error(a, n);
            if e > worst {
                worst = e;
                worst_index = i;
            }
        }
        let a = analytic.as_slice().map(|s| s[worst_index]).unwrap_or(0.0);
        let n = numeric.as_slice().map(|s| s[worst_index]).unwrap_or(0.0);
        GradReport {
            max_rel_err: worst,
            worst_index,
            analytic_at_worst: a,
            numeric_at_worst: n,
            coords_checked: analytic.len(),
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn quadratic_derivative() {
        let x = ArrayD::from_elem(IxDyn(&[]), 3.0);
        let mut f = |v: &ArrayD<f64>| v[[]] * v[[]];
        let g = finite_difference_grad(&mut f, &x, 1e-3).unwrap();
        assert!((g[[]] - 6.0).abs() < 1e-6, "got {}", g[[]]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25])
            .unwrap();
        let mut f = |v: &ArrayD<f64>| v.sum();
        let g = finite_difference_grad(&mut f, &x, 1e-3).unwrap();
        for &v in g.iter() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // ln of the negative probe at x − eps is NaN, which must be surfaced.
        let x = ArrayD::from_elem(IxDyn(&[1]), 0.0);
        let mut g = |v: &ArrayD<f64>| v[[0]].ln();
        assert!(finite_difference_grad(&mut g, &x, 1e-3).is_err());
    }

    #[test]
    fn rel_error_floor_guards_tiny_gradients() {
        assert!(rel_error(1e-9, 0.0) < 1e-6);
        assert!(rel_error(2.0, 1.0) > 0.4);
        assert_eq!(rel_error(5.0, 5.0), 0.0);
    }

    #[test]
    fn report_locates_worst_coordinate() {
        let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap();
        let n = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.5, 3.0]).unwrap();
        let r = GradReport::compare(&a, &n);
        assert_eq!(r.worst_index, 1);
        assert!(r.max_rel_err > 0.1);
        assert!(!r.passes(1e-4));
    }
}
