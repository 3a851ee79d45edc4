//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Lower Cholesky factor, or `NotPositiveDefinite`.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.unpack())
        .ok_or(Error::NotPositiveDefinite)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Ratio of smallest to largest eigenvalue of a symmetric matrix.
pub fn reciprocal_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 {
        0.0
    } else {
        min / max
    }
}

/// `a' M b`
pub fn quad_form(a: &DVector<f64>, m: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    (a.transpose() * m * b)[(0, 0)]
}

/// Least squares with intercept: residuals of `y` on `x`.
pub(crate) fn simple_ols(y: &[f64], x: &[f64]) -> Option<(f64, f64)> {
    let n = y.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= 1e-14 * scale * scale * n {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}
