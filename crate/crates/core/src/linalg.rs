//! Small dense linear algebra on top of `nalgebra`, plus a pivoted
//! Gauss-Jordan inverse that works for any [`Real`] scalar.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Inverse and determinant of a row-major `d x d` matrix.
///
/// Returns `None` when a pivot underflows `tol` in absolute value.
pub fn inverse_with_det<T: Real>(m: &[T], d: usize, tol: f64) -> Option<(Vec<T>, T)> {
    debug_assert_eq!(m.len(), d * d);
    let mut a = m.to_vec();
    let mut inv: Vec<T> = (0..d * d)
        .map(|k| T::cst(if k / d == k % d { 1.0 } else { 0.0 }))
        .collect();
    let mut det = T::cst(1.0);
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| {
                a[i * d + col]
                    .re()
                    .abs()
                    .total_cmp(&a[j * d + col].re().abs())
            })
            .unwrap();
        if a[piv * d + col].re().abs() <= tol {
            return None;
        }
        if piv != col {
            for k in 0..d {
                a.swap(piv * d + k, col * d + k);
                inv.swap(piv * d + k, col * d + k);
            }
            det = -det;
        }
        let p = a[col * d + col];
        det = det * p;
        for k in 0..d {
            a[col * d + k] = a[col * d + k] / p;
            inv[col * d + k] = inv[col * d + k] / p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = a[r * d + col];
            if f.re() == 0.0 {
                continue;
            }
            for k in 0..d {
                a[r * d + k] = a[r * d + k] - f * a[col * d + k];
                inv[r * d + k] = inv[r * d + k] - f * inv[col * d + k];
            }
        }
    }
    Some((inv, det))
}

/// `(A + A^T) / 2` together with the largest absolute asymmetry.
pub fn symmetrize(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let mut out = m.clone();
    let mut worst = 0.0_f64;
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (m[(i, j)], m[(j, i)]);
            worst = worst.max((x - y).abs());
            let avg = 0.5 * (x + y);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    (out, worst)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric inverse square root `C^{-1/2}` of a positive definite matrix.
pub fn spd_inverse_sqrt(c: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let eig = c.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lo > 0.0) {
        return Err(Error::SingularMatrix {
            name: name.to_string(),
            det: eig.eigenvalues.iter().product(),
        });
    }
    let scaled = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * scaled * eig.eigenvectors.transpose())
}

/// Symmetric square root of a positive semi-definite matrix.
pub fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = c.clone().symmetric_eigen();
    let scaled = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * scaled * eig.eigenvectors.transpose()
}

/// `|v|_C = sqrt(<C^{-1} v, v>)`, computed through a Cholesky factor.
pub fn mahalanobis(c: &DMatrix<f64>, v: &[f64], name: &str) -> Result<f64> {
    let chol = c.clone().cholesky().ok_or_else(|| Error::SingularMatrix {
        name: name.to_string(),
        det: c.determinant(),
    })?;
    let x = chol.solve(&DVector::from_column_slice(v));
    Ok(x.dot(&DVector::from_column_slice(v)).max(0.0).sqrt())
}
