//! Small dense matrix helpers used by the covariance estimators.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Trace of a square matrix.
pub fn trace(a: &Array2<f64>) -> f64 {
    a.diag().sum()
}

/// Frobenius norm.
pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// tr(A·B) for square A, B of equal size, without materializing the product.
pub fn trace_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[[i, j]] * b[[j, i]];
        }
    }
    acc
}

/// acc += scale · v·vᵀ
pub fn add_scaled_outer(acc: &mut Array2<f64>, v: &Array1<f64>, scale: f64) {
    let p = v.len();
    debug_assert_eq!(acc.dim(), (p, p));
    for i in 0..p {
        let vi = scale * v[i];
        for j in 0..p {
            acc[[i, j]] += vi * v[j];
        }
    }
}

/// v·vᵀ
pub fn outer(v: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((v.len(), v.len()));
    add_scaled_outer(&mut m, v, 1.0);
    m
}

/// Largest |a_ij − a_ji| over all pairs.
pub fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            dev = dev.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    dev
}

/// Reject matrices whose asymmetry exceeds `tol` relative to their scale.
pub fn check_symmetric(a: &Array2<f64>, tol: f64) -> Result<()> {
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    let dev = max_asymmetry(a);
    if dev > tol * scale {
        return Err(Error::AsymmetricMatrix { max_dev: dev });
    }
    Ok(())
}

/// Whether `a + shift·I` admits a Cholesky factorization.
///
/// Succeeds iff the minimum eigenvalue of `a` exceeds `-shift` (up to
/// roundoff), which is how the PSD invariants are checked without an
/// eigensolver.
pub fn is_psd_within(a: &Array2<f64>, shift: f64) -> bool {
    let n = a.nrows();
    if n != a.ncols() {
        return false;
    }
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]] + if i == j { shift } else { 0.0 };
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return false;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    true
}

/// Pearson correlation of two equally sized slices.
///
/// Returns `None` for fewer than two points or zero variance on either side.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
