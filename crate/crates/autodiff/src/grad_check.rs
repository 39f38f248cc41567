//! Central-difference gradient checking.
//!
//! Used by tests throughout the workspace to validate analytic gradients
//! against an independent numeric estimate: perturb one coordinate at a time
//! and difference the scalar loss.

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut point = x.to_vec();
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let up = f(&point);
        point[i] = x[i] - h;
        let down = f(&point);
        point[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest absolute elementwise difference between two equally long slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max absolute error between the analytic gradient and a central-difference
/// estimate of `f` at `x`.
pub fn check<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let numeric = central_diff(f, x, h);
    max_abs_diff(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x_i^2), grad = 2x
        let x = vec![1.0, -2.0, 0.5];
        let f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(check(f, &x, &analytic, 1e-5) < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = vec![1.0, 2.0];
        let f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let wrong = vec![2.0, 3.0]; // second entry should be 4
        assert!(check(f, &x, &wrong, 1e-5) > 0.9);
    }
}
