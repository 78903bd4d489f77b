//! Poisson kernel, Gaussian densities and the smooth localizer `psi_a`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};

use crate::error::{Error, Result};
use crate::special::unit_sphere_area;

/// Multivariate normal law `N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArgument("Gaussian dimension must be positive".into()));
        }
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch { what: "covariance entries", expected: d * d, got: covariance.len() });
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (covariance[i * d + j], covariance[j * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidArgument(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(GaussianSpec { mean, covariance })
    }

    pub fn standard(d: usize) -> Self {
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            c[i * d + i] = 1.0;
        }
        GaussianSpec { mean: vec![0.0; d], covariance: c }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }
}

/// Fundamental solution `Q_d` of the Laplace equation.
pub fn poisson_kernel(d: usize, x: &[f64]) -> Result<f64> {
    check_dim(d, x)?;
    if d == 1 {
        return Ok(x[0].max(0.0));
    }
    let r = norm(x);
    if r == 0.0 {
        return Err(Error::SingularKernel { dim: d });
    }
    let a = unit_sphere_area(d);
    Ok(if d == 2 { r.ln() / a } else { -r.powi(2 - d as i32) / a })
}

/// Gradient of `Q_d`: the Heaviside step for `d = 1`, `c_d x |x|^{-d}` otherwise.
pub fn poisson_gradient(d: usize, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; d];
    poisson_gradient_into(d, x, &mut out)?;
    Ok(out)
}

/// Allocation-free form of [`poisson_gradient`].
pub fn poisson_gradient_into(d: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
    check_dim(d, x)?;
    if d == 1 {
        out[0] = if x[0] > 0.0 { 1.0 } else { 0.0 };
        return Ok(());
    }
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return Err(Error::SingularKernel { dim: d });
    }
    let scale = poisson_constant(d) / r2.powf(d as f64 / 2.0);
    for (o, v) in out.iter_mut().zip(x) {
        *o = scale * v;
    }
    Ok(())
}

/// `c_d` in `grad Q_d(x) = c_d x |x|^{-d}`.
pub fn poisson_constant(d: usize) -> f64 {
    match d {
        1 => 1.0,
        2 => 1.0 / (2.0 * PI),
        _ => (d as f64 - 2.0) / unit_sphere_area(d),
    }
}

fn check_dim(d: usize, x: &[f64]) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidArgument("kernel dimension must be positive".into()));
    }
    if x.len() != d {
        return Err(Error::DimensionMismatch { what: "kernel argument", expected: d, got: x.len() });
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Normal density with the usual one-half in the exponent.
pub fn gaussian_density(spec: &GaussianSpec, y: &[f64]) -> Result<f64> {
    let d = spec.dim();
    if y.len() != d {
        return Err(Error::DimensionMismatch { what: "density argument", expected: d, got: y.len() });
    }
    let c = spec.cov_matrix();
    let chol = c.clone().cholesky().ok_or_else(|| Error::SingularMatrix {
        name: "Gaussian covariance".into(),
        det: c.determinant(),
    })?;
    let det = chol.l().diagonal().iter().map(|v| v * v).product::<f64>();
    if det <= 0.0 || !det.is_finite() {
        return Err(Error::SingularMatrix { name: "Gaussian covariance".into(), det });
    }
    let v = DVector::from_iterator(d, y.iter().zip(&spec.mean).map(|(a, b)| a - b));
    let q = v.dot(&chol.solve(&v));
    Ok((-0.5 * q).exp() / ((2.0 * PI).powf(d as f64 / 2.0) * det.sqrt()))
}

/// The cut-off `psi_a`: one on `[0, a)`, `exp(1 - a / (2a - x))` on `[a, 2a)`, zero beyond.
pub fn localizer(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x < a {
        1.0
    } else if x < 2.0 * a {
        (1.0 - a / (2.0 * a - x)).exp()
    } else {
        0.0
    }
}

/// `(ln psi_a)'(x)`; the right-hand branch is used at the kink `x = a`.
pub fn localizer_log_deriv(a: f64, x: f64) -> Result<f64> {
    if x < a {
        Ok(0.0)
    } else if x < 2.0 * a {
        let g = 2.0 * a - x;
        Ok(-a / (g * g))
    } else {
        Err(Error::LocalizerVanishes { a, x })
    }
}

/// `e a^{-p} p^p e^{-p}`, the closed-form constant attached to the localizer.
pub fn c_p_bound(a: f64, p: f64) -> f64 {
    E * a.powf(-p) * p.powf(p) * (-p).exp()
}

/// Exact value of `sup_x |(ln psi_a)'(x)|^p psi_a(x)`.
///
/// With `u = a / (2a - x) >= 1` the quantity is `e a^{-p} u^{2p} e^{-u}`,
/// maximised at `u = max(2p, 1)`.
pub fn localizer_weight_sup(a: f64, p: f64) -> f64 {
    let u = (2.0 * p).max(1.0);
    E * a.powf(-p) * u.powf(2.0 * p) * (-u).exp()
}
