//! Small dense helpers shared by the estimation and tightening code.

use nalgebra::{DMatrix, DVector};

/// Induced infinity norm (maximum absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced 1-norm (maximum absolute column sum).
pub fn one_norm(m: &DMatrix<f64>) -> f64 {
    inf_norm(&m.transpose())
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

pub fn matrix_power(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Extreme eigenvalues of a symmetric matrix (symmetrized first).
pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let s = (m + m.transpose()) * 0.5;
    let ev = s.symmetric_eigenvalues();
    (ev.min(), ev.max())
}

pub fn vec_inf(v: &DVector<f64>) -> f64 {
    v.amax()
}
