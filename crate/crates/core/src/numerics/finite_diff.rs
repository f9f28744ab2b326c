//! Central finite differences, the ground truth for gradient checks.

use crate::numerics::Tensor;

/// Seven-point central difference for every coordinate `i`:
///
/// ```text
/// (45 (f₊₁ - f₋₁) - 9 (f₊₂ - f₋₂) + (f₊₃ - f₋₃)) / 60h,   fₖ = f(x + k·h·e_i)
/// ```
///
/// The truncation error is `O(h^6)`, so `h` can be large enough that
/// roundoff stays small even for coordinates whose gradient is several orders
/// of magnitude below the largest one.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    finite_diff_vjp(|t| vec![f(t)], x, &[1.0], h)
}

/// Gradient of `w · f(x)` for a vector-valued `f`, by the same stencil.
/// Output elements are differenced before they are weighted and summed, so
/// elements a coordinate does not influence cancel exactly instead of adding
/// roundoff.
pub fn finite_diff_vjp<F>(mut f: F, x: &Tensor<f64>, weights: &[f64], h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> Vec<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |k: f64| {
            probe.data_mut()[i] = orig + k * h;
            let y = f(&probe);
            assert_eq!(y.len(), weights.len(), "output length changed under perturbation");
            y
        };
        let (p3, p2, p1) = (at(3.0), at(2.0), at(1.0));
        let (m1, m2, m3) = (at(-1.0), at(-2.0), at(-3.0));
        probe.data_mut()[i] = orig;
        let total: f64 = (0..weights.len())
            .map(|j| weights[j] * (45.0 * (p1[j] - m1[j]) - 9.0 * (p2[j] - m2[j]) + (p3[j] - m3[j])))
            .sum();
        out.push(total / (60.0 * h));
    }
    x.with_shape_of(out)
}

/// Coordinates whose analytic and numeric gradients are both below this are
/// skipped by [`max_relative_error`].
pub const GRAD_FLOOR: f64 = 1e-8;

/// Largest `|a - n| / max(|a|, |n|)` over coordinates where either value
/// exceeds [`GRAD_FLOOR`].
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .filter_map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            (scale > GRAD_FLOOR).then(|| (a - n).abs() / scale)
        })
        .fold(0.0, f64::max)
}
