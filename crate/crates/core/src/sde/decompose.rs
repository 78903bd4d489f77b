//! Short-time decompositions `F = F_past + G + R` and the conditional
//! remainder size `theta`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::spd_inverse_sqrt;
use crate::malliavin::GaussianChart;
use crate::mc::{Moments, StreamKey};

use super::engine::{euler_from, tangent_from};
use super::model::{ModelSpec, StepEval};

/// The pieces of `F = F_past + G + R` on the last `inner_steps` steps.
///
/// `G` is linear in the inner coordinates with coefficients `g_jac`
/// (`d x n_inner`, row-major), so conditionally on the past it is centred
/// Gaussian with covariance `c_delta = g_jac g_jac^T`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub delta: f64,
    pub inner_steps: usize,
    pub inner_chart: GaussianChart,
    /// Full state at time `T - delta`.
    pub outer_state: Vec<f64>,
    pub f_past: Vec<f64>,
    pub g_jac: Vec<f64>,
    pub c_delta: DMatrix<f64>,
    /// `x_T(phi) - x_{T-delta}(phi)` for skeleton-centred decompositions.
    pub skeleton_increment: Vec<f64>,
}

/// One draw of the remainder and its derivatives in the inner coordinates.
#[derive(Debug, Clone)]
pub struct RemainderSample {
    pub r: Vec<f64>,
    pub dr: Vec<f64>,
    pub d2r: Option<Vec<f64>>,
    /// `X_T` of the completed path.
    pub terminal: Vec<f64>,
}

impl Decomposition {
    pub fn dim(&self) -> usize {
        self.f_past.len()
    }

    pub fn n_inner(&self) -> usize {
        self.inner_chart.n()
    }

    /// `G` evaluated at the inner coordinates.
    pub fn gaussian_part(&self, z_inner: &[f64]) -> Vec<f64> {
        let n = self.n_inner();
        (0..self.dim()).map(|i| (0..n).map(|k| self.g_jac[i * n + k] * z_inner[k]).sum()).collect()
    }

    /// Completes the path with `z_inner` and returns `R` (with derivatives
    /// when `second` is set, first derivatives always).
    pub fn remainder(&self, model: &ModelSpec, z_inner: &[f64], second: bool) -> Result<RemainderSample> {
        let d = self.dim();
        let n = self.n_inner();
        let t = tangent_from(model, &self.outer_state, &self.inner_chart, z_inner, second)?;
        let end = t.path.terminal();
        let g = self.gaussian_part(z_inner);
        let r = (0..d).map(|i| end[i] - self.outer_state[i] - self.skeleton_increment[i] - g[i]).collect();
        let dr = (0..d * n).map(|p| t.jac[p] - self.g_jac[p]).collect();
        let d2r = t.hess.map(|h| h[..d * n * n].to_vec());
        Ok(RemainderSample { r, dr, d2r, terminal: end[..d].to_vec() })
    }
}

fn inner_steps(chart: &GaussianChart, delta: f64) -> Result<usize> {
    let t_end = chart.horizon();
    let target = t_end - delta;
    if !(delta > 0.0) || delta > t_end * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!("delta = {delta} outside (0, T]")));
    }
    let tol = 1e-9 * t_end;
    let pos = chart.grid().iter().position(|t| (t - target).abs() <= tol).ok_or(Error::GridMisaligned { delta })?;
    if pos == chart.steps() {
        return Err(Error::GridMisaligned { delta });
    }
    Ok(chart.steps() - pos)
}

fn outer_part(model: &ModelSpec, chart: &GaussianChart, z: &[f64], k: usize) -> Result<(Vec<f64>, GaussianChart)> {
    let outer_steps = chart.steps() - k;
    let inner_chart = chart.tail(k)?;
    let state = if outer_steps == 0 {
        model.x0.clone()
    } else {
        let outer_chart = GaussianChart::new(chart.grid()[..=outer_steps].to_vec(), chart.m())?;
        euler_from(model, &model.x0, &outer_chart, &z[..outer_steps * chart.m()])?.terminal().to_vec()
    };
    Ok((state, inner_chart))
}

/// Ito decomposition: `F_past = X_{T-delta}`, `G = sum_j sigma_j(Z_{T-delta}) dW^j`
/// over the last `delta` units of time, `C_delta = sigma sigma^T delta`.
///
/// Only the outer coordinates of `z` are read.
pub fn decompose_ito(model: &ModelSpec, chart: &GaussianChart, z: &[f64], delta: f64) -> Result<Decomposition> {
    if z.len() != chart.n() {
        return Err(Error::DimensionMismatch { what: "Gaussian coordinates", expected: chart.n(), got: z.len() });
    }
    let k = inner_steps(chart, delta)?;
    let (outer_state, inner_chart) = outer_part(model, chart, z, k)?;
    let (d, m) = (model.d, model.m);
    let n = inner_chart.n();
    let sig = model.diffusion_matrix(&outer_state);
    let mut g_jac = vec![0.0; d * n];
    for u in 0..k {
        let h = inner_chart.dt(u).sqrt();
        for j in 0..m {
            for i in 0..d {
                g_jac[i * n + u * m + j] = sig[(i, j)] * h;
            }
        }
    }
    Ok(Decomposition {
        delta,
        inner_steps: k,
        c_delta: gram(&g_jac, d, n),
        f_past: outer_state[..d].to_vec(),
        outer_state,
        inner_chart,
        g_jac,
        skeleton_increment: vec![0.0; d],
    })
}

fn gram(g: &[f64], d: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| (0..n).map(|k| g[i * n + k] * g[j * n + k]).sum())
}

/// Checks the two-dimensional shape `dX^1 = s(X) dW + b_1(X) dt`,
/// `dX^2 = b_2(X) dt` with one driving component and no extra state.
pub fn check_h1_shape(model: &ModelSpec) -> Result<()> {
    if model.d != 2 || model.n != 0 || model.m != 1 {
        return Err(Error::ModelShape(format!("{}: expected d = 2, n = 0, m = 1", model.name)));
    }
    if !model.sigma_exprs(0)[1].is_zero() {
        return Err(Error::ModelShape(format!("{}: second diffusion component must vanish", model.name)));
    }
    Ok(())
}

/// Decomposition of `F = X_T - x_T(phi)` for the degenerate two-dimensional
/// model, centred on a skeleton whose values at `T - delta` and `T` are
/// `skel_past` and `skel_end`.
///
/// The second Gaussian component uses the weights `T - t_{u+1}`, which make
/// `G` the exact conditional Gaussian part of the Euler scheme for
/// constant coefficients.
pub fn decompose_hormander(
    model: &ModelSpec,
    chart: &GaussianChart,
    z: &[f64],
    delta: f64,
    skel_past: &[f64],
    skel_end: &[f64],
) -> Result<Decomposition> {
    check_h1_shape(model)?;
    if z.len() != chart.n() {
        return Err(Error::DimensionMismatch { what: "Gaussian coordinates", expected: chart.n(), got: z.len() });
    }
    let k = inner_steps(chart, delta)?;
    let (outer_state, inner_chart) = outer_part(model, chart, z, k)?;
    let mut ws = StepEval::new(2, 1);
    model.eval(&outer_state, 1, &mut ws);
    let s1 = ws.s[0];
    // d_sigma b_2 = sigma . grad b_2 = s1 * d_1 b_2
    let dsb2 = s1 * ws.db[2];
    let n = inner_chart.n();
    let t_end = inner_chart.horizon();
    let mut g_jac = vec![0.0; 2 * n];
    for u in 0..k {
        let h = inner_chart.dt(u).sqrt();
        g_jac[u] = s1 * h;
        g_jac[n + u] = dsb2 * (t_end - inner_chart.t(u + 1)) * h;
    }
    Ok(Decomposition {
        delta,
        inner_steps: k,
        c_delta: gram(&g_jac, 2, n),
        f_past: vec![outer_state[0] - skel_past[0], outer_state[1] - skel_past[1]],
        outer_state,
        inner_chart,
        g_jac,
        skeleton_increment: vec![skel_end[0] - skel_past[0], skel_end[1] - skel_past[1]],
    })
}

/// The continuous-time covariance
/// `delta s^2 [[1, d1b2 delta / 2], [d1b2 delta / 2, d1b2^2 delta^2 / 3]]`
/// of the Gaussian part for the degenerate two-dimensional model.
pub fn hormander_covariance(s1: f64, d1b2: f64, delta: f64) -> DMatrix<f64> {
    let f = delta * s1 * s1;
    DMatrix::from_row_slice(2, 2, &[f, f * d1b2 * delta / 2.0, f * d1b2 * delta / 2.0, f * d1b2 * d1b2 * delta * delta / 3.0])
}

/// Nested estimate of `theta_{delta,q}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaEstimate {
    pub q: u32,
    pub value: f64,
    pub std_error: f64,
    pub inner_samples: usize,
    /// Set when sampling stopped early because the estimate provably
    /// exceeded the gate passed to [`conditional_theta_gated`].
    pub rejected_early: bool,
}

/// `theta^q = E(|R|_C^q + (sum |DR|_C^2)^{q/2} + (sum |D^2 R|_C^2)^{q/2} | past)`
/// estimated from `n_inner` inner paths drawn from `key`.
pub fn conditional_theta(model: &ModelSpec, dec: &Decomposition, q: u32, n_inner: usize, key: &StreamKey) -> Result<ThetaEstimate> {
    conditional_theta_gated(model, dec, q, n_inner, key, None)
}

/// As [`conditional_theta`], stopping as soon as the running sum of the
/// (nonnegative) summands shows that `theta > gate`.
pub fn conditional_theta_gated(
    model: &ModelSpec,
    dec: &Decomposition,
    q: u32,
    n_inner: usize,
    key: &StreamKey,
    gate: Option<f64>,
) -> Result<ThetaEstimate> {
    if n_inner < 2 {
        return Err(Error::NotEnoughSamples(format!("theta needs at least 2 inner paths, got {n_inner}")));
    }
    let d = dec.dim();
    let n = dec.n_inner();
    let root = spd_inverse_sqrt(&dec.c_delta, "C_delta")?;
    let qf = q as f64;
    let mut mom = Moments::default();
    let mut z = vec![0.0; n];
    let mut sum = 0.0;
    let scaled_sq = |v: &dyn Fn(usize) -> f64| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            let w: f64 = (0..d).map(|a| root[(i, a)] * v(a)).sum();
            s += w * w;
        }
        s
    };
    for i in 0..n_inner {
        key.normals(i as u64, &mut z);
        let rs = dec.remainder(model, &z, true)?;
        let r2 = scaled_sq(&|a| rs.r[a]);
        let mut d1 = 0.0;
        for k in 0..n {
            d1 += scaled_sq(&|a| rs.dr[a * n + k]);
        }
        let mut d2 = 0.0;
        if let Some(h) = &rs.d2r {
            for kl in 0..n * n {
                d2 += scaled_sq(&|a| h[a * n * n + kl]);
            }
        }
        let term = r2.powf(qf / 2.0) + d1.powf(qf / 2.0) + d2.powf(qf / 2.0);
        mom.push(term);
        sum += term;
        if let Some(g) = gate {
            if sum / n_inner as f64 > g.powf(qf) {
                let value = (sum / n_inner as f64).powf(1.0 / qf);
                return Ok(ThetaEstimate { q, value, std_error: f64::NAN, inner_samples: i + 1, rejected_early: true });
            }
        }
    }
    let value = mom.mean.max(0.0).powf(1.0 / qf);
    let std_error = if value > 0.0 { mom.std_error() / (qf * value.powf(qf - 1.0)) } else { 0.0 };
    Ok(ThetaEstimate { q, value, std_error, inner_samples: n_inner, rejected_early: false })
}
