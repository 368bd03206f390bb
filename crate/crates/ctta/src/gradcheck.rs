//! Numerical gradient checking against central finite differences.
//!
//! The checker re-evaluates the supplied function at perturbed inputs, so it
//! is independent of the reverse-mode path it validates.

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to `x`.
///
/// `f` must be a pure function of the buffer contents; the buffer is restored
/// after each probe.
pub fn central_difference<F>(f: &mut F, x: &mut [f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let saved = x[i];
        x[i] = saved + step;
        let plus = f(x);
        x[i] = saved - step;
        let minus = f(x);
        x[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst per-component relative error between an analytic and a numeric
/// gradient: `|a - n| / max(1, |a|, |n|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Convenience wrapper: checks the analytic gradient of `f` at `x` and
/// returns the worst relative error.
pub fn check<F>(f: &mut F, x: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let numeric = central_difference(f, &mut probe, step);
    max_rel_error(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![1.0, -2.0, 0.5];
        let analytic = vec![2.0, -4.0, 1.0];
        assert!(check(&mut f, &x, &analytic, DEFAULT_STEP) < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut f = |x: &[f64]| x[0] * x[0];
        let x = vec![3.0];
        let wrong = vec![5.0];
        assert!(check(&mut f, &x, &wrong, DEFAULT_STEP) > 0.1);
    }
}
