//! Central finite differences for gradient verification.
//!
//! These are the independent oracles used throughout the test suites; they
//! never touch the analytic derivative code paths they are checking.

use ndarray::Array1;

/// Central-difference gradient of a scalar function at `point`.
pub fn central_diff_grad<F>(f: F, point: &Array1<f64>, step: f64) -> Array1<f64>
where
    F: Fn(&Array1<f64>) -> f64,
{
    let mut grad = Array1::zeros(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = f(&probe);
        probe[i] = point[i] - step;
        let minus = f(&probe);
        probe[i] = point[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Central-difference directional derivative `(f(x+h·v) − f(x−h·v)) / 2h`.
pub fn central_diff_directional<F>(f: F, point: &Array1<f64>, dir: &Array1<f64>, step: f64) -> f64
where
    F: Fn(&Array1<f64>) -> f64,
{
    let plus = f(&(point + &(dir * step)));
    let minus = f(&(point - &(dir * step)));
    (plus - minus) / (2.0 * step)
}

/// Relative error between two vectors, `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &Array1<f64>, b: &Array1<f64>, floor: f64) -> f64 {
    let diff = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
