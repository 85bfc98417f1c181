//! Small dense symmetric-matrix helpers for location correlation matrices.

use nalgebra::{DMatrix, SymmetricEigen};

/// Pivots below this are treated as exact zeros by [`psd_cholesky`].
const PIVOT_TOL: f64 = 1e-10;

/// Lower-triangular factor `L` with `L Lᵀ = a` for a positive semidefinite `a`.
///
/// Columns whose pivot vanishes are set to zero instead of failing, so rank
/// deficient matrices (e.g. the all-ones correlation) factor cleanly.
pub fn psd_cholesky(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= PIVOT_TOL {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    l
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Clip negative eigenvalues to zero and rescale to unit diagonal.
pub fn nearest_correlation(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let mut m = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    let scale: Vec<f64> = (0..n).map(|i| m[(i, i)].max(0.0).sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = if scale[i] > 0.0 && scale[j] > 0.0 {
                m[(i, j)] / (scale[i] * scale[j])
            } else if i == j {
                1.0
            } else {
                0.0
            };
        }
    }
    m
}

/// Copy the upper triangle onto the lower one and pin the diagonal to 1.
pub fn finalize_correlation(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = m[(i, j)].clamp(0.0, 1.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
