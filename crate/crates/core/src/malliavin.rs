//! Malliavin calculus on a finite Gaussian chart.
//!
//! A functional is described by its value and its derivatives with respect
//! to the normalised coordinates `Z_k`. Because the Brownian increment of
//! step `k` is `sqrt(dt_k) Z_k`, sums of squared coordinate derivatives
//! coincide with the time integrals of the squared Malliavin derivatives, so
//! no re-weighting is needed anywhere in this module.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{localizer, localizer_log_deriv};
use crate::linalg::inverse_with_det;
use crate::scalar::{Dual, Real};

/// Time grid and number of driving Brownian components.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianChart {
    grid: Vec<f64>,
    m: usize,
}

impl GaussianChart {
    pub fn new(grid: Vec<f64>, m: usize) -> Result<Self> {
        if grid.len() < 2 || m == 0 {
            return Err(Error::InvalidArgument("a chart needs at least one step and one component".into()));
        }
        if grid[0] != 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("time grid must start at 0 and increase strictly".into()));
        }
        Ok(GaussianChart { grid, m })
    }

    pub fn uniform(horizon: f64, steps: usize, m: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::InvalidArgument(format!("bad uniform grid (T = {horizon}, steps = {steps})")));
        }
        let grid = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        Self::new(grid, m)
    }

    /// Number of Gaussian coordinates, `m` per step.
    pub fn n(&self) -> usize {
        self.m * self.steps()
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
    pub fn t(&self, k: usize) -> f64 {
        self.grid[k]
    }
    pub fn dt(&self, k: usize) -> f64 {
        self.grid[k + 1] - self.grid[k]
    }
    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }
    /// Coordinate index of component `j` on step `k`.
    pub fn index(&self, k: usize, j: usize) -> usize {
        k * self.m + j
    }

    /// Chart of the last `k` steps, shifted to start at time zero.
    pub fn tail(&self, k: usize) -> Result<Self> {
        let s = self.steps();
        if k == 0 || k > s {
            return Err(Error::InvalidArgument(format!("tail of {k} steps from a {s}-step chart")));
        }
        let t0 = self.grid[s - k];
        Self::new(self.grid[s - k..].iter().map(|t| t - t0).collect(), self.m)
    }
}

/// A `d`-dimensional functional of `n` Gaussian coordinates with derivatives.
///
/// Layouts are row-major: `jac[i * n + k]`, `hess[(i * n + k) * n + l]` and
/// `third[((i * n + k) * n + l) * n + r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothFunctional {
    pub dim: usize,
    pub n: usize,
    pub value: Vec<f64>,
    pub jac: Vec<f64>,
    pub hess: Option<Vec<f64>>,
    pub third: Option<Vec<f64>>,
    /// Largest asymmetry removed from `hess` on construction.
    pub asymmetry: f64,
}

impl SmoothFunctional {
    pub fn new(value: Vec<f64>, n: usize, jac: Vec<f64>, hess: Option<Vec<f64>>, third: Option<Vec<f64>>) -> Result<Self> {
        let d = value.len();
        if jac.len() != d * n {
            return Err(Error::DimensionMismatch { what: "jacobian entries", expected: d * n, got: jac.len() });
        }
        let mut asymmetry: f64 = 0.0;
        let hess = match hess {
            None => None,
            Some(mut h) => {
                if h.len() != d * n * n {
                    return Err(Error::DimensionMismatch { what: "hessian entries", expected: d * n * n, got: h.len() });
                }
                for i in 0..d {
                    for k in 0..n {
                        for l in 0..k {
                            let (p, q) = ((i * n + k) * n + l, (i * n + l) * n + k);
                            let scale = 1.0 + h[p].abs().max(h[q].abs());
                            asymmetry = asymmetry.max((h[p] - h[q]).abs() / scale);
                            let avg = 0.5 * (h[p] + h[q]);
                            h[p] = avg;
                            h[q] = avg;
                        }
                    }
                }
                Some(h)
            }
        };
        if let Some(t) = &third {
            if t.len() != d * n * n * n {
                return Err(Error::DimensionMismatch { what: "third-derivative entries", expected: d * n * n * n, got: t.len() });
            }
        }
        Ok(SmoothFunctional { dim: d, n, value, jac, hess, third, asymmetry })
    }

    /// A constant functional: every derivative vanishes.
    pub fn constant(value: Vec<f64>, n: usize) -> Self {
        let d = value.len();
        SmoothFunctional {
            dim: d,
            n,
            value,
            jac: vec![0.0; d * n],
            hess: Some(vec![0.0; d * n * n]),
            third: Some(vec![0.0; d * n * n * n]),
            asymmetry: 0.0,
        }
    }

    pub fn hess(&self) -> Result<&[f64]> {
        self.hess.as_deref().ok_or(Error::MissingDerivatives("second derivatives of F"))
    }

    fn dot_jac(&self, row: &[f64], j: usize) -> f64 {
        let n = self.n;
        row.iter().zip(&self.jac[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum()
    }
}

/// Malliavin covariance `sigma_F = J J^T`.
pub fn covariance(f: &SmoothFunctional) -> DMatrix<f64> {
    let (d, n) = (f.dim, f.n);
    DMatrix::from_fn(d, d, |i, j| (0..n).map(|k| f.jac[i * n + k] * f.jac[j * n + k]).sum())
}

fn check_point(chart: &GaussianChart, z: &[f64], f: &SmoothFunctional) -> Result<()> {
    if z.len() != chart.n() {
        return Err(Error::DimensionMismatch { what: "chart coordinates", expected: chart.n(), got: z.len() });
    }
    if f.n != z.len() {
        return Err(Error::DimensionMismatch { what: "functional coordinates", expected: z.len(), got: f.n });
    }
    Ok(())
}

/// Ornstein-Uhlenbeck operator `LF = Z . grad F - trace(Hess F)`.
pub fn ou_operator(chart: &GaussianChart, z: &[f64], f: &SmoothFunctional) -> Result<Vec<f64>> {
    check_point(chart, z, f)?;
    let h = f.hess()?;
    let n = f.n;
    Ok((0..f.dim)
        .map(|i| {
            let zj: f64 = (0..n).map(|k| z[k] * f.jac[i * n + k]).sum();
            let tr: f64 = (0..n).map(|k| h[(i * n + k) * n + k]).sum();
            zj - tr
        })
        .collect())
}

/// Everything the weight formula needs, already contracted over the chart.
///
/// `m3[(a * d + b) * d + c] = sum_{k,l} H^a_{kl} J^b_l J^c_k`. The same
/// structure is produced by the O(n) adjoint pass of the SDE engine.
#[derive(Debug, Clone)]
pub struct WeightInputs<T> {
    pub d: usize,
    pub g: T,
    pub sigma: Vec<T>,
    pub zj: Vec<T>,
    pub trace: Vec<T>,
    pub m3: Vec<T>,
    /// `<DG, DF^j>`.
    pub dg_df: Vec<T>,
    pub loc: Option<LocalizerInputs<T>>,
}

#[derive(Debug, Clone)]
pub struct LocalizerInputs<T> {
    pub psi: T,
    pub dlogpsi: T,
    /// `<D Theta, DF^j>`.
    pub dtheta_df: Vec<T>,
}

impl<T: Real> WeightInputs<T> {
    /// Contract full derivative tensors. `g`/`dg` describe the scalar `G`.
    pub fn from_tensors(d: usize, n: usize, z: &[T], jac: &[T], hess: &[T], g: T, dg: &[T]) -> Self {
        let zero = T::cst(0.0);
        let mut sigma = vec![zero; d * d];
        for a in 0..d {
            for b in 0..=a {
                let mut s = zero;
                for k in 0..n {
                    s = s + jac[a * n + k] * jac[b * n + k];
                }
                sigma[a * d + b] = s;
                sigma[b * d + a] = s;
            }
        }
        let mut zj = vec![zero; d];
        let mut trace = vec![zero; d];
        for a in 0..d {
            for k in 0..n {
                zj[a] = zj[a] + z[k] * jac[a * n + k];
                trace[a] = trace[a] + hess[(a * n + k) * n + k];
            }
        }
        // hj[(a * n + k) * d + b] = sum_l H^a_{kl} J^b_l
        let mut hj = vec![zero; d * n * d];
        for a in 0..d {
            for k in 0..n {
                for b in 0..d {
                    let mut s = zero;
                    for l in 0..n {
                        s = s + hess[(a * n + k) * n + l] * jac[b * n + l];
                    }
                    hj[(a * n + k) * d + b] = s;
                }
            }
        }
        let mut m3 = vec![zero; d * d * d];
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    let mut s = zero;
                    for k in 0..n {
                        s = s + hj[(a * n + k) * d + b] * jac[c * n + k];
                    }
                    m3[(a * d + b) * d + c] = s;
                }
            }
        }
        let dg_df = (0..d)
            .map(|j| {
                let mut s = zero;
                for k in 0..n {
                    s = s + dg[k] * jac[j * n + k];
                }
                s
            })
            .collect();
        WeightInputs { d, g, sigma, zj, trace, m3, dg_df, loc: None }
    }
}

fn pivot_tol(sigma: &[f64], d: usize) -> f64 {
    let scale = (0..d).map(|i| sigma[i * d + i].abs()).fold(0.0, f64::max);
    1e-14 * scale.max(f64::MIN_POSITIVE)
}

/// Evaluates the weight `W` with `E(d_i f(F) G psi(Theta)) = E(f(F) W_i)`.
pub fn weight<T: Real>(inp: &WeightInputs<T>) -> Result<Vec<T>> {
    let d = inp.d;
    let zero = T::cst(0.0);
    if let Some(loc) = &inp.loc {
        if loc.psi.re() == 0.0 {
            return Ok(vec![zero; d]);
        }
    }
    let sig_re: Vec<f64> = inp.sigma.iter().map(|v| v.re()).collect();
    let (sh, _det) = inverse_with_det(&inp.sigma, d, pivot_tol(&sig_re, d)).ok_or_else(|| Error::SingularMatrix {
        name: "Malliavin covariance".into(),
        det: DMatrix::from_row_slice(d, d, &sig_re).determinant(),
    })?;
    let m3 = |a: usize, b: usize, c: usize| inp.m3[(a * d + b) * d + c];
    let mut w = vec![zero; d];
    for i in 0..d {
        let mut acc = zero;
        for j in 0..d {
            let shji = sh[j * d + i];
            let lf = inp.zj[j] - inp.trace[j];
            // <D sigma_hat^{ji}, DF^j>
            let mut s = zero;
            for p in 0..d {
                for q in 0..d {
                    s = s + sh[j * d + p] * sh[q * d + i] * (m3(p, q, j) + m3(q, p, j));
                }
            }
            let s = -s;
            let mut term = inp.g * shji * lf - inp.g * s - shji * inp.dg_df[j];
            if let Some(loc) = &inp.loc {
                term = term - loc.dlogpsi * inp.g * shji * loc.dtheta_df[j];
            }
            acc = acc + term;
        }
        w[i] = match &inp.loc {
            Some(loc) => loc.psi * acc,
            None => acc,
        };
    }
    Ok(w)
}

/// Integration-by-parts weight `W(F, G psi_a(Theta))`.
///
/// `g` must be scalar with first derivatives; `loc` optionally supplies a
/// scalar `Theta` and the threshold `a` of the localizer.
pub fn ibp_weight(
    chart: &GaussianChart,
    z: &[f64],
    f: &SmoothFunctional,
    g: &SmoothFunctional,
    loc: Option<(&SmoothFunctional, f64)>,
) -> Result<Vec<f64>> {
    check_point(chart, z, f)?;
    check_scalar(g, f.n, "G")?;
    let hess = f.hess()?;
    let mut inp = WeightInputs::from_tensors(f.dim, f.n, z, &f.jac, hess, g.value[0], &g.jac);
    if let Some((theta, a)) = loc {
        check_scalar(theta, f.n, "Theta")?;
        let th = theta.value[0];
        let psi = localizer(a, th);
        if psi == 0.0 {
            return Ok(vec![0.0; f.dim]);
        }
        inp.loc = Some(LocalizerInputs {
            psi,
            dlogpsi: localizer_log_deriv(a, th)?,
            dtheta_df: (0..f.dim).map(|j| f.dot_jac(&theta.jac, j)).collect(),
        });
    }
    weight(&inp)
}

fn check_scalar(g: &SmoothFunctional, n: usize, what: &'static str) -> Result<()> {
    if g.dim != 1 {
        return Err(Error::DimensionMismatch { what, expected: 1, got: g.dim });
    }
    if g.n != n {
        return Err(Error::DimensionMismatch { what, expected: n, got: g.n });
    }
    Ok(())
}

/// Iterated weight `H_alpha(F, G)` for `|alpha| <= 2` (0-based indices).
///
/// For `alpha = (i, j)` the inner weight `W_i(F, G)` is differentiated along
/// every coordinate with dual numbers, which needs third derivatives of `F`
/// and second derivatives of `G`.
pub fn iterated_weight(chart: &GaussianChart, z: &[f64], f: &SmoothFunctional, g: &SmoothFunctional, alpha: &[usize]) -> Result<f64> {
    if let Some(&bad) = alpha.iter().find(|&&i| i >= f.dim) {
        return Err(Error::InvalidArgument(format!("multi-index entry {bad} out of range for d = {}", f.dim)));
    }
    match alpha.len() {
        0 => Ok(g.value[0]),
        1 => Ok(ibp_weight(chart, z, f, g, None)?[alpha[0]]),
        2 => {
            check_point(chart, z, f)?;
            check_scalar(g, f.n, "G")?;
            let (d, n) = (f.dim, f.n);
            let hess = f.hess()?;
            let third = f.third.as_deref().ok_or(Error::MissingDerivatives("third derivatives of F"))?;
            let ghess = g.hess.as_deref().ok_or(Error::MissingDerivatives("second derivatives of G"))?;
            let mut inner_val = 0.0;
            let mut inner_grad = vec![0.0; n];
            for dir in 0..n {
                let zd: Vec<Dual> = (0..n).map(|k| Dual::new(z[k], if k == dir { 1.0 } else { 0.0 })).collect();
                let jd: Vec<Dual> = (0..d * n).map(|p| Dual::new(f.jac[p], hess[p * n + dir])).collect();
                let hd: Vec<Dual> = (0..d * n * n).map(|p| Dual::new(hess[p], third[p * n + dir])).collect();
                let gd = Dual::new(g.value[0], g.jac[dir]);
                let dgd: Vec<Dual> = (0..n).map(|k| Dual::new(g.jac[k], ghess[k * n + dir])).collect();
                let inp = WeightInputs::from_tensors(d, n, &zd, &jd, &hd, gd, &dgd);
                let w = weight(&inp)?[alpha[0]];
                inner_val = w.v;
                inner_grad[dir] = w.d;
            }
            let inp = WeightInputs::from_tensors(d, n, z, &f.jac, hess, inner_val, &inner_grad);
            Ok(weight(&inp)?[alpha[1]])
        }
        k => Err(Error::UnsupportedOrder(k)),
    }
}

/// Malliavin covariance, its inverse, `LF` and `<D sigma_hat^{ji}, DF^l>`.
#[derive(Debug, Clone)]
pub struct MalliavinData {
    pub sigma: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub det_sigma: f64,
    pub ou: Vec<f64>,
    /// Entry `[(j * d + i) * d + l]`.
    pub dsigma_contract: Vec<f64>,
}

pub fn malliavin_data(chart: &GaussianChart, z: &[f64], f: &SmoothFunctional) -> Result<MalliavinData> {
    check_point(chart, z, f)?;
    let d = f.dim;
    let inp = WeightInputs::from_tensors(d, f.n, z, &f.jac, f.hess()?, 1.0, &vec![0.0; f.n]);
    let sigma = DMatrix::from_row_slice(d, d, &inp.sigma);
    let det_sigma = sigma.determinant();
    let (sh, _) = inverse_with_det(&inp.sigma, d, pivot_tol(&inp.sigma, d))
        .ok_or_else(|| Error::SingularMatrix { name: "Malliavin covariance".into(), det: det_sigma })?;
    let m3 = |a: usize, b: usize, c: usize| inp.m3[(a * d + b) * d + c];
    let mut ds = vec![0.0; d * d * d];
    for j in 0..d {
        for i in 0..d {
            for l in 0..d {
                let mut s = 0.0;
                for p in 0..d {
                    for q in 0..d {
                        s += sh[j * d + p] * sh[q * d + i] * (m3(p, q, l) + m3(q, p, l));
                    }
                }
                ds[(j * d + i) * d + l] = -s;
            }
        }
    }
    Ok(MalliavinData {
        sigma,
        sigma_hat: DMatrix::from_row_slice(d, d, &sh),
        det_sigma,
        ou: (0..d).map(|i| inp.zj[i] - inp.trace[i]).collect(),
        dsigma_contract: ds,
    })
}

/// Monte Carlo estimate of the Sobolev norm `||F||_{L,p}`, `L` in `{1, 2}`.
pub fn sobolev_norm(samples: &[SmoothFunctional], order: usize, p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NotEnoughSamples("Sobolev norm needs at least one sample".into()));
    }
    if !(1..=2).contains(&order) {
        return Err(Error::UnsupportedOrder(order));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("Sobolev exponent p = {p} must be >= 1")));
    }
    let pow = |sq: f64| sq.powf(p / 2.0);
    let mut acc = 0.0;
    for s in samples {
        acc += pow(s.value.iter().map(|v| v * v).sum());
        acc += pow(s.jac.iter().map(|v| v * v).sum());
        if order == 2 {
            acc += pow(s.hess()?.iter().map(|v| v * v).sum());
        }
    }
    Ok((acc / samples.len() as f64).powf(1.0 / p))
}
