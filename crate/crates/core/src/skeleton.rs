//! Deterministic control layer.
//!
//! The skeleton of a model is the solution of the controlled ODE
//! `z' = S(z) phi(t) + b_bar(z)`, where `S` stacks the diffusion fields and
//! `b_bar` is the Stratonovich-corrected drift. This module integrates it,
//! synthesises controls that make the X-component follow a target path, and
//! estimates the probability that Euler paths stay in a tube around it.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::expr::{cst, CompiledField, Expr};
use crate::linalg::{max_eigenvalue, min_eigenvalue};
use crate::malliavin::GaussianChart;
use crate::mc::{run_blocks, wilson, Moments, StreamKey, BLOCK};
use crate::sde::{euler_simulate, check_h1_shape, ModelSpec};
use crate::{Error, Result};

/// Piecewise linear control `phi : [0, T] -> R^m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlPath {
    pub times: Vec<f64>,
    pub m: usize,
    /// Node values, `values[k * m + j]` at `times[k]`.
    pub values: Vec<f64>,
}

impl ControlPath {
    pub fn new(times: Vec<f64>, m: usize, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("control grid must be strictly increasing with at least two nodes".into()));
        }
        if values.len() != times.len() * m {
            return Err(Error::DimensionMismatch { what: "control values", expected: times.len() * m, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("control values must be finite".into()));
        }
        Ok(ControlPath { times, m, values })
    }

    pub fn zero(times: Vec<f64>, m: usize) -> Result<Self> {
        let len = times.len() * m;
        Self::new(times, m, vec![0.0; len])
    }

    pub fn constant(times: Vec<f64>, phi: &[f64]) -> Result<Self> {
        let values = phi.iter().copied().cycle().take(times.len() * phi.len()).collect();
        Self::new(times, phi.len(), values)
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.m..(k + 1) * self.m]
    }

    /// Linear interpolation, held constant outside the grid.
    pub fn value_at(&self, t: f64, out: &mut [f64]) {
        let k = locate(&self.times, t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        for j in 0..self.m {
            out[j] = (1.0 - w) * self.values[k * self.m + j] + w * self.values[(k + 1) * self.m + j];
        }
    }

    /// `int_0^T |phi|^2 dt`, exact for the piecewise linear interpolant.
    pub fn energy(&self) -> f64 {
        self.energy_on(self.times[0], self.horizon())
    }

    /// `int_a^b |phi|^2 dt`.
    pub fn energy_on(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        let mut pa = vec![0.0; self.m];
        let mut pb = vec![0.0; self.m];
        for w in self.times.windows(2) {
            let (lo, hi) = (w[0].max(a), w[1].min(b));
            if hi <= lo {
                continue;
            }
            self.value_at(lo, &mut pa);
            self.value_at(hi, &mut pb);
            let s: f64 = pa.iter().zip(&pb).map(|(u, v)| u * u + u * v + v * v).sum();
            total += (hi - lo) * s / 3.0;
        }
        total
    }
}

/// Index `k` with `times[k] <= t < times[k + 1]`, clamped to the grid.
fn locate(times: &[f64], t: f64) -> usize {
    let k = times.partition_point(|s| *s <= t);
    k.saturating_sub(1).min(times.len() - 2)
}

/// Skeleton states `z_t = (x_t, y_t)` with their time derivatives.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkeletonPath {
    pub times: Vec<f64>,
    pub dim: usize,
    pub d: usize,
    pub states: Vec<f64>,
    pub derivs: Vec<f64>,
    /// Largest ODE residual observed at the interval midpoints.
    pub max_residual: f64,
}

impl SkeletonPath {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn deriv(&self, k: usize) -> &[f64] {
        &self.derivs[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }

    /// Cubic Hermite interpolation through states and derivatives.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let k = locate(&self.times, t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (h00, h10) = (2.0 * s * s * s - 3.0 * s * s + 1.0, s * s * s - 2.0 * s * s + s);
        let (h01, h11) = (-2.0 * s * s * s + 3.0 * s * s, s * s * s - s * s);
        let (a, b) = (self.state(k), self.state(k + 1));
        let (da, db) = (self.deriv(k), self.deriv(k + 1));
        (0..self.dim).map(|i| h00 * a[i] + h10 * h * da[i] + h01 * b[i] + h11 * h * db[i]).collect()
    }

    /// `|x'_t|` at the grid nodes.
    pub fn speeds(&self) -> Vec<f64> {
        (0..self.times.len()).map(|k| self.deriv(k)[..self.d].iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    /// `int_a^b |x'_t| dt` by the trapezoidal rule on the clipped grid.
    pub fn speed_integral(&self, a: f64, b: f64) -> f64 {
        let sp = self.speeds();
        let mut total = 0.0;
        for k in 0..self.times.len() - 1 {
            let (t0, t1) = (self.times[k], self.times[k + 1]);
            let (lo, hi) = (t0.max(a), t1.min(b));
            if hi <= lo {
                continue;
            }
            let lerp = |t: f64| sp[k] + (sp[k + 1] - sp[k]) * (t - t0) / (t1 - t0);
            total += 0.5 * (hi - lo) * (lerp(lo) + lerp(hi));
        }
        total
    }
}

/// Stratonovich-corrected drift `b_bar = b - 1/2 sum_j (S_j . grad) S_j`
/// over the full state, built symbolically so derivatives stay available.
pub fn stratonovich_drift(model: &ModelSpec) -> CompiledField {
    let dim = model.dim();
    let exprs: Vec<Expr> = (0..dim)
        .map(|i| {
            let mut e = model.drift_exprs()[i].clone();
            for j in 0..model.m {
                let s = model.sigma_exprs(j);
                for (a, sa) in s.iter().enumerate() {
                    let corr = sa.clone() * s[i].diff(a);
                    if !corr.is_zero() {
                        e = e + cst(-0.5) * corr;
                    }
                }
            }
            e
        })
        .collect();
    CompiledField::new(exprs, dim)
}

/// `[sigma, b](x) = (sigma . grad) b - (b . grad) sigma`.
pub fn lie_bracket(sigma: &CompiledField, b: &CompiledField, x: &[f64]) -> Result<Vec<f64>> {
    let dim = sigma.dim;
    if b.dim != dim || sigma.len() != dim || b.len() != dim || x.len() != dim {
        return Err(Error::DimensionMismatch { what: "Lie bracket fields", expected: dim, got: b.len() });
    }
    let (mut sv, mut bv) = (vec![0.0; dim], vec![0.0; dim]);
    let (mut sg, mut bg) = (vec![0.0; dim * dim], vec![0.0; dim * dim]);
    sigma.value(x, &mut sv);
    b.value(x, &mut bv);
    sigma.gradient(x, &mut sg);
    b.gradient(x, &mut bg);
    Ok((0..dim)
        .map(|i| (0..dim).map(|a| sv[a] * bg[i * dim + a] - bv[a] * sg[i * dim + a]).sum())
        .collect())
}

/// Outcome of the weak Hörmander test `|sigma_1(y)| > c_*`, `|d_1 b_2(y)| > c_*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HormanderCheck {
    pub holds: bool,
    pub sigma_margin: f64,
    pub bracket_margin: f64,
    /// `det [sigma(y), [sigma, b](y)] = sigma_1^2 d_1 b_2`.
    pub span_det: f64,
}

pub fn weak_hormander_check(model: &ModelSpec, y: &[f64], c_star: f64) -> Result<HormanderCheck> {
    check_h1_shape(model)?;
    if y.len() != 2 {
        return Err(Error::DimensionMismatch { what: "point", expected: 2, got: y.len() });
    }
    let mut s = [0.0; 2];
    let mut db = [0.0; 4];
    model.sigma_field(0).value(y, &mut s);
    model.drift_field().gradient(y, &mut db);
    let br = lie_bracket(model.sigma_field(0), model.drift_field(), y)?;
    let sigma_margin = s[0].abs() - c_star;
    let bracket_margin = db[2].abs() - c_star;
    Ok(HormanderCheck {
        holds: sigma_margin > 0.0 && bracket_margin > 0.0,
        sigma_margin,
        bracket_margin,
        span_det: s[0] * br[1] - s[1] * br[0],
    })
}

/// Right-hand side `S(z) phi + b_bar(z)` of the skeleton ODE.
struct SkeletonField<'a> {
    model: &'a ModelSpec,
    bbar: CompiledField,
    buf: Vec<f64>,
}

impl<'a> SkeletonField<'a> {
    fn new(model: &'a ModelSpec) -> Self {
        SkeletonField { model, bbar: stratonovich_drift(model), buf: vec![0.0; model.dim()] }
    }

    fn eval(&mut self, z: &[f64], phi: &[f64], out: &mut [f64]) {
        self.bbar.value(z, out);
        for (j, p) in phi.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            self.model.sigma_field(j).value(z, &mut self.buf);
            for (o, s) in out.iter_mut().zip(&self.buf) {
                *o += s * p;
            }
        }
    }

    /// Full-state diffusion matrix `S(z)`, `dim x m`.
    fn sigma(&mut self, z: &[f64]) -> DMatrix<f64> {
        let dim = self.model.dim();
        let mut s = DMatrix::zeros(dim, self.model.m);
        for j in 0..self.model.m {
            self.model.sigma_field(j).value(z, &mut self.buf);
            for i in 0..dim {
                s[(i, j)] = self.buf[i];
            }
        }
        s
    }
}

/// One classical fourth-order Runge-Kutta step of `z' = f(t, z)`.
fn rk4_step<F>(f: &mut F, t: f64, h: f64, z: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = z.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let shifted = |k: &[f64], c: f64| -> Vec<f64> { z.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    f(t, z, &mut k1)?;
    f(t + 0.5 * h, &shifted(&k1, 0.5 * h), &mut k2)?;
    f(t + 0.5 * h, &shifted(&k2, 0.5 * h), &mut k3)?;
    f(t + h, &shifted(&k3, h), &mut k4)?;
    Ok((0..n).map(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
}

const BLOW_UP: f64 = 1e12;

fn check_state(z: &[f64], t: f64) -> Result<()> {
    if z.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
        return Err(Error::BlowUp { t });
    }
    Ok(())
}

/// Hermite midpoint residual `|z'_mid - f(t_mid, z_mid)|` of one interval.
fn midpoint_residual<F>(f: &mut F, t0: f64, h: f64, z0: &[f64], z1: &[f64], d0: &[f64], d1: &[f64]) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = z0.len();
    let zm: Vec<f64> = (0..n).map(|i| 0.5 * (z0[i] + z1[i]) + h * (d0[i] - d1[i]) / 8.0).collect();
    let mut fm = vec![0.0; n];
    f(t0 + 0.5 * h, &zm, &mut fm)?;
    Ok((0..n)
        .map(|i| {
            let dm = 1.5 * (z1[i] - z0[i]) / h - 0.25 * (d0[i] + d1[i]);
            (dm - fm[i]).powi(2)
        })
        .sum::<f64>()
        .sqrt())
}

fn integrate<F>(mut f: F, z0: &[f64], grid: &[f64], d: usize) -> Result<SkeletonPath>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("integration grid must be strictly increasing with at least two nodes".into()));
    }
    let dim = z0.len();
    let mut states = Vec::with_capacity(grid.len() * dim);
    let mut derivs = vec![0.0; grid.len() * dim];
    states.extend_from_slice(z0);
    f(grid[0], z0, &mut derivs[..dim])?;
    let mut max_residual: f64 = 0.0;
    for k in 0..grid.len() - 1 {
        let h = grid[k + 1] - grid[k];
        let next = rk4_step(&mut f, grid[k], h, &states[k * dim..])?;
        check_state(&next, grid[k + 1])?;
        states.extend_from_slice(&next);
        let (head, tail) = derivs.split_at_mut((k + 1) * dim);
        f(grid[k + 1], &next, &mut tail[..dim])?;
        let r = midpoint_residual(&mut f, grid[k], h, &states[k * dim..(k + 1) * dim], &next, &head[k * dim..], &tail[..dim])?;
        max_residual = max_residual.max(r);
    }
    Ok(SkeletonPath { times: grid.to_vec(), dim, d, states, derivs, max_residual })
}

/// Integrates `z' = S(z) phi_t + b_bar(z)` from `z0` over `grid`.
pub fn integrate_skeleton(model: &ModelSpec, phi: &ControlPath, z0: &[f64], grid: &[f64]) -> Result<SkeletonPath> {
    if z0.len() != model.dim() {
        return Err(Error::DimensionMismatch { what: "initial state", expected: model.dim(), got: z0.len() });
    }
    if phi.m != model.m {
        return Err(Error::DimensionMismatch { what: "control dimension", expected: model.m, got: phi.m });
    }
    let mut field = SkeletonField::new(model);
    let mut p = vec![0.0; model.m];
    integrate(
        |t, z, out| {
            phi.value_at(t, &mut p);
            field.eval(z, &p, out);
            Ok(())
        },
        z0,
        grid,
        model.d,
    )
}

/// A continuously differentiable target for the X-component.
pub trait TargetPath {
    fn dim(&self) -> usize;
    fn value(&self, t: f64) -> Vec<f64>;
    fn derivative(&self, t: f64) -> Vec<f64>;
}

/// Straight line from `from` at time 0 to `to` at `horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinePath {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub horizon: f64,
}

impl TargetPath for LinePath {
    fn dim(&self) -> usize {
        self.from.len()
    }

    fn value(&self, t: f64) -> Vec<f64> {
        let s = t / self.horizon;
        self.from.iter().zip(&self.to).map(|(a, b)| a + s * (b - a)).collect()
    }

    fn derivative(&self, _t: f64) -> Vec<f64> {
        self.from.iter().zip(&self.to).map(|(a, b)| (b - a) / self.horizon).collect()
    }
}

/// Componentwise polynomial, `coeffs[i][k]` multiplying `t^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialPath {
    pub coeffs: Vec<Vec<f64>>,
}

impl TargetPath for PolynomialPath {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }

    fn value(&self, t: f64) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.iter().rev().fold(0.0, |acc, a| acc * t + a)).collect()
    }

    fn derivative(&self, t: f64) -> Vec<f64> {
        self.coeffs
            .iter()
            .map(|c| c.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, a)| acc * t + k as f64 * a))
            .collect()
    }
}

/// A synthesised control together with the skeleton it generates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Synthesis {
    pub control: ControlPath,
    pub skeleton: SkeletonPath,
    pub energy: f64,
}

/// `phi = sigma^T (sigma sigma^T)^{-1} (x' - b_bar)` at `z`.
fn control_at(field: &mut SkeletonField, t: f64, z: &[f64], xdot: &[f64]) -> Result<Vec<f64>> {
    let d = field.model.d;
    let s = field.sigma(z);
    let sx = s.rows(0, d).into_owned();
    let a = &sx * sx.transpose();
    let lo = min_eigenvalue(&a);
    if lo <= 1e-12 * max_eigenvalue(&a).max(1.0) {
        return Err(Error::SingularControl { t, min_eig: lo });
    }
    let mut bb = vec![0.0; z.len()];
    field.bbar.value(z, &mut bb);
    let rhs = nalgebra::DVector::from_iterator(d, (0..d).map(|i| xdot[i] - bb[i]));
    let sol = a.cholesky().ok_or(Error::SingularControl { t, min_eig: lo })?.solve(&rhs);
    Ok((sx.transpose() * sol).iter().copied().collect())
}

/// Control making the X-component of the skeleton follow `target`, with
/// the Y-component integrated alongside from `y0`.
pub fn synthesize_control(model: &ModelSpec, target: &dyn TargetPath, y0: &[f64], grid: &[f64]) -> Result<Synthesis> {
    let (d, n) = (model.d, model.n);
    if target.dim() != d {
        return Err(Error::DimensionMismatch { what: "target path", expected: d, got: target.dim() });
    }
    if y0.len() != n {
        return Err(Error::DimensionMismatch { what: "initial y", expected: n, got: y0.len() });
    }
    let start = target.value(grid[0]);
    if start.iter().zip(&model.x0).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + b.abs())) {
        return Err(Error::InvalidArgument("target path does not start at the model's initial point".into()));
    }
    let mut field = SkeletonField::new(model);
    let full = |t: f64, y: &[f64]| -> Vec<f64> {
        let mut z = target.value(t);
        z.extend_from_slice(y);
        z
    };
    let y_rhs = |t: f64, y: &[f64], out: &mut [f64], field: &mut SkeletonField| -> Result<Vec<f64>> {
        let z = full(t, y);
        let phi = control_at(field, t, &z, &target.derivative(t))?;
        let mut zd = vec![0.0; d + n];
        field.eval(&z, &phi, &mut zd);
        out.copy_from_slice(&zd[d..]);
        Ok(phi)
    };
    let mut y = y0.to_vec();
    let mut phis = Vec::with_capacity(grid.len() * model.m);
    let mut scratch = vec![0.0; n];
    phis.extend(y_rhs(grid[0], &y, &mut scratch, &mut field)?);
    let mut ys = y.clone();
    for k in 0..grid.len() - 1 {
        if n > 0 {
            let mut f = |t: f64, yy: &[f64], out: &mut [f64]| y_rhs(t, yy, out, &mut field).map(|_| ());
            y = rk4_step(&mut f, grid[k], grid[k + 1] - grid[k], &y)?;
            check_state(&y, grid[k + 1])?;
        }
        ys.extend_from_slice(&y);
        phis.extend(y_rhs(grid[k + 1], &y, &mut scratch, &mut field)?);
    }
    let control = ControlPath::new(grid.to_vec(), model.m, phis)?;
    let dim = d + n;
    let mut states = Vec::with_capacity(grid.len() * dim);
    let mut derivs = vec![0.0; grid.len() * dim];
    for (k, t) in grid.iter().enumerate() {
        let z = full(*t, &ys[k * n..(k + 1) * n]);
        field.eval(&z, control.node(k), &mut derivs[k * dim..(k + 1) * dim]);
        states.extend(z);
    }
    let mut p = vec![0.0; model.m];
    let mut f = |t: f64, z: &[f64], out: &mut [f64]| {
        control.value_at(t, &mut p);
        field.eval(z, &p, out);
        Ok(())
    };
    let mut max_residual: f64 = 0.0;
    for k in 0..grid.len() - 1 {
        let (a, b) = (k * dim, (k + 1) * dim);
        let r = midpoint_residual(&mut f, grid[k], grid[k + 1] - grid[k], &states[a..b], &states[b..b + dim], &derivs[a..b], &derivs[b..b + dim])?;
        max_residual = max_residual.max(r);
    }
    let skeleton = SkeletonPath { times: grid.to_vec(), dim, d, states, derivs, max_residual };
    let energy = control.energy();
    Ok(Synthesis { control, skeleton, energy })
}

/// Membership test for `C(x) = {phi : x_T(phi) = x}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attainability {
    pub attained: bool,
    pub endpoint_error: f64,
    pub control: ControlPath,
    pub skeleton: SkeletonPath,
}

/// Tries `phi = 0` first, then a control synthesised along `target`
/// (a straight line from the initial point when `None`), re-integrates and
/// accepts when the X-endpoint is within `tol` of `x`.
pub fn check_attainable(
    model: &ModelSpec,
    x: &[f64],
    horizon: f64,
    steps: usize,
    tol: f64,
    target: Option<&dyn TargetPath>,
) -> Result<Attainability> {
    let d = model.d;
    if x.len() != d {
        return Err(Error::DimensionMismatch { what: "target point", expected: d, got: x.len() });
    }
    if !(horizon > 0.0) || steps == 0 {
        return Err(Error::InvalidArgument("horizon and steps must be positive".into()));
    }
    let grid: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    let gap = |s: &SkeletonPath| s.terminal()[..d].iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let zero = ControlPath::zero(grid.clone(), model.m)?;
    let free = integrate_skeleton(model, &zero, &model.x0, &grid)?;
    let err = gap(&free);
    if err <= tol {
        return Ok(Attainability { attained: true, endpoint_error: err, control: zero, skeleton: free });
    }
    let line = LinePath { from: model.x0[..d].to_vec(), to: x.to_vec(), horizon };
    let target = target.unwrap_or(&line);
    let syn = synthesize_control(model, target, &model.x0[d..], &grid)?;
    let skeleton = integrate_skeleton(model, &syn.control, &model.x0, &grid)?;
    let err = gap(&skeleton);
    Ok(Attainability { attained: err <= tol, endpoint_error: err, control: syn.control, skeleton })
}

/// `f_t <= mu f_s` for all grid pairs with `|t - s| <= h`, with a relative
/// slack of `1e-12`.
pub fn check_lmuh(times: &[f64], f: &[f64], mu: f64, h: f64) -> bool {
    assert_eq!(times.len(), f.len());
    for i in 0..f.len() {
        for j in i + 1..f.len() {
            if (times[j] - times[i]).abs() > h {
                break;
            }
            let ok = |a: f64, b: f64| a <= mu * b * (1.0 + 1e-12);
            if !ok(f[i], f[j]) || !ok(f[j], f[i]) {
                return false;
            }
        }
    }
    true
}

/// Sampled lower bound for the eigenvalues of `sigma sigma^T(x_t, y)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EllipticityCertificate {
    pub lambda_min: f64,
    /// Largest eigenvalue seen over the same points.
    pub lambda_max: f64,
    pub worst_time: f64,
    pub worst_y: Vec<f64>,
    pub points: usize,
    pub positive: bool,
    /// Set when the bound outside the sampled box rests on the caller's word.
    pub waiver: bool,
}

/// Minimises the smallest eigenvalue of `sigma sigma^T` over the path nodes
/// and, when the model has a Y-component, over a grid of `n_grid` points per
/// axis of the box `[y_lo, y_hi]`. A box only covers part of `R^n`, so
/// models with `n > 0` need `waiver = true`.
pub fn uniform_ellipticity(
    model: &ModelSpec,
    path: &SkeletonPath,
    y_lo: &[f64],
    y_hi: &[f64],
    n_grid: usize,
    waiver: bool,
) -> Result<EllipticityCertificate> {
    let (d, n) = (model.d, model.n);
    if n > 0 && !waiver {
        return Err(Error::Refused("ellipticity over all y needs an explicit waiver for the region outside the box".into()));
    }
    if y_lo.len() != n || y_hi.len() != n {
        return Err(Error::DimensionMismatch { what: "y box", expected: n, got: y_lo.len() });
    }
    let per = if n == 0 { 1 } else { n_grid.max(2) };
    let total = per.pow(n as u32);
    let mut best = EllipticityCertificate {
        lambda_min: f64::INFINITY,
        lambda_max: 0.0,
        worst_time: 0.0,
        worst_y: vec![],
        points: 0,
        positive: false,
        waiver,
    };
    let mut z = vec![0.0; d + n];
    for (k, t) in path.times.iter().enumerate() {
        z[..d].copy_from_slice(&path.state(k)[..d]);
        for idx in 0..total {
            let mut r = idx;
            for a in 0..n {
                z[d + a] = y_lo[a] + (y_hi[a] - y_lo[a]) * (r % per) as f64 / (per - 1) as f64;
                r /= per;
            }
            let a = model.sigma_sigma_t(&z);
            let lam = min_eigenvalue(&a);
            best.lambda_max = best.lambda_max.max(max_eigenvalue(&a));
            best.points += 1;
            if lam < best.lambda_min {
                best.lambda_min = lam;
                best.worst_time = *t;
                best.worst_y = z[d..].to_vec();
            }
        }
    }
    best.positive = best.lambda_min > 0.0;
    Ok(best)
}

/// How tube exits between grid times are accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitMonitoring {
    /// Exit only when a grid value leaves the tube.
    GridOnly,
    /// Additionally weights each step by the Brownian-bridge probability of
    /// staying inside between the two grid values.
    BrownianBridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TubeEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub monitoring: ExitMonitoring,
}

/// Probability of staying in one step, given the deviations at both ends.
fn bridge_stay(e0: &[f64], e1: &[f64], eta: f64, var_dt: f64) -> f64 {
    if var_dt <= 0.0 {
        return 1.0;
    }
    if e0.len() == 1 {
        let (a, b) = (e0[0], e1[0]);
        let up = 1.0 - (-2.0 * (eta - a) * (eta - b) / var_dt).exp();
        let down = 1.0 - (-2.0 * (eta + a) * (eta + b) / var_dt).exp();
        return (up * down).max(0.0);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (a, b) = (eta - norm(e0), eta - norm(e1));
    (1.0 - (-2.0 * a * b / var_dt).exp()).max(0.0)
}

/// `P(|X_t - x_t(phi)| < eta for all t <= T)` over Euler paths on `chart`.
pub fn tube_probability(
    model: &ModelSpec,
    skeleton: &SkeletonPath,
    eta: f64,
    n_paths: usize,
    chart: &GaussianChart,
    key: &StreamKey,
    monitoring: ExitMonitoring,
    workers: usize,
) -> Result<TubeEstimate> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("tube radius must be positive, got {eta}")));
    }
    if n_paths < 2 {
        return Err(Error::NotEnoughSamples(format!("tube estimate needs at least 2 paths, got {n_paths}")));
    }
    let d = model.d;
    let steps = chart.steps();
    let centre: Vec<Vec<f64>> = (0..=steps).map(|k| skeleton.value_at(chart.t(k))[..d].to_vec()).collect();
    let blocks = run_blocks(n_paths, BLOCK, workers, |range| {
        let mut z = vec![0.0; chart.n()];
        let mut mo = Moments::default();
        let mut e0 = vec![0.0; d];
        let mut e1 = vec![0.0; d];
        for i in range {
            key.normals(i as u64, &mut z);
            let path = euler_simulate(model, chart, &z)?;
            let mut w = 1.0;
            for k in 0..=steps {
                for a in 0..d {
                    e1[a] = path.state(k)[a] - centre[k][a];
                }
                if e1.iter().map(|v| v * v).sum::<f64>() >= eta * eta {
                    w = 0.0;
                    break;
                }
                if k > 0 && monitoring == ExitMonitoring::BrownianBridge {
                    let v = max_eigenvalue(&model.sigma_sigma_t(path.state(k - 1)));
                    w *= bridge_stay(&e0, &e1, eta, v * chart.dt(k - 1));
                }
                e0.copy_from_slice(&e1);
            }
            mo.push(w);
        }
        Ok(mo)
    })?;
    let mut total = Moments::default();
    for b in &blocks {
        total.merge(b);
    }
    let (probability, std_error) = match monitoring {
        ExitMonitoring::GridOnly => {
            let hits = (total.mean * total.n as f64).round() as u64;
            let (_, half) = wilson(hits, total.n as u64);
            (total.mean, half)
        }
        ExitMonitoring::BrownianBridge => (total.mean, total.std_error()),
    };
    Ok(TubeEstimate { probability, std_error, n_paths, monitoring })
}

/// `rho_delta = sqrt(max(delta, int_{T - delta}^T |phi|^2))`.
pub fn rho_delta(phi: &ControlPath, delta: f64) -> f64 {
    let t = phi.horizon();
    delta.max(phi.energy_on(t - delta, t)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{powi, var};
    use crate::models::{build, default_model};
    use crate::special::brownian_two_sided_stay;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn grid(t: f64, steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| t * k as f64 / steps as f64).collect()
    }

    fn scalar(sigma: Expr, b: Expr) -> ModelSpec {
        ModelSpec::new("scalar", 1, 0, vec![vec![sigma]], vec![b], vec![0.0]).unwrap()
    }

    #[test]
    fn stratonovich_correction() {
        let m = scalar(cst(2.0), cst(0.3) * var(0));
        assert!((stratonovich_drift(&m).exprs()[0].eval(&[1.5]) - 0.45).abs() < 1e-15);
        let m = scalar(var(0), cst(0.0));
        let f = stratonovich_drift(&m);
        for x in [-1.0, 0.5, 2.0] {
            assert!((f.exprs()[0].eval(&[x]) + 0.5 * x).abs() < 1e-15);
        }
        let k = default_model("kolmogorov").unwrap();
        let f = stratonovich_drift(&k);
        assert_eq!(f.exprs()[1].eval(&[0.7, 3.0]), 0.7);
        assert_eq!(f.exprs()[0].eval(&[0.7, 3.0]), 0.0);
    }

    #[test]
    fn bracket_examples() {
        let c1 = CompiledField::new(vec![cst(1.0), cst(2.0)], 2);
        let c2 = CompiledField::new(vec![cst(-1.0), cst(0.5)], 2);
        assert_eq!(lie_bracket(&c1, &c2, &[0.3, 0.4]).unwrap(), vec![0.0, 0.0]);
        let k = default_model("kolmogorov").unwrap();
        for x in [[0.0, 0.0], [1.3, -2.0]] {
            assert_eq!(lie_bracket(k.sigma_field(0), k.drift_field(), &x).unwrap(), vec![0.0, 1.0]);
        }
        let h = default_model("hormander_trig").unwrap();
        let x = [0.4, -0.9];
        let br = lie_bracket(h.sigma_field(0), h.drift_field(), &x).unwrap();
        let (mut s, mut db) = ([0.0; 2], [0.0; 4]);
        h.sigma_field(0).value(&x, &mut s);
        h.drift_field().gradient(&x, &mut db);
        assert!((br[1] - s[0] * db[2]).abs() < 1e-14);
    }

    fn flow(f: &CompiledField, x: &[f64], t: f64) -> Vec<f64> {
        let mut rhs = |_: f64, z: &[f64], out: &mut [f64]| {
            f.value(z, out);
            Ok(())
        };
        let mut z = x.to_vec();
        for _ in 0..10 {
            z = rk4_step(&mut rhs, 0.0, t / 10.0, &z).unwrap();
        }
        z
    }

    fn commutator(v: &CompiledField, w: &CompiledField, x: &[f64], t: f64) -> Vec<f64> {
        let z = flow(w, &flow(v, &flow(w, &flow(v, x, t), t), -t), -t);
        z.iter().zip(x).map(|(a, b)| (a - b) / (t * t)).collect()
    }

    #[test]
    fn bracket_matches_flow_commutator() {
        let h = default_model("hormander_trig").unwrap();
        let (v, w) = (h.sigma_field(0), h.drift_field());
        for x in [[0.4, -0.9], [1.1, 0.2], [-2.0, 0.7]] {
            let exact = lie_bracket(v, w, &x).unwrap();
            let t = 1e-3;
            let (a, b) = (commutator(v, w, &x, t), commutator(v, w, &x, t / 2.0));
            for i in 0..2 {
                assert!((2.0 * b[i] - a[i] - exact[i]).abs() < 1e-4, "{:?} vs {:?}", b, exact);
            }
        }
    }

    #[test]
    fn hormander_check_examples() {
        let k = default_model("kolmogorov").unwrap();
        let c = weak_hormander_check(&k, &[0.3, 2.0], 0.5).unwrap();
        assert!(c.holds && c.sigma_margin == 0.5 && c.bracket_margin == 0.5);
        let mut p = BTreeMap::new();
        p.insert("sigma".to_string(), 0.0);
        assert!(!weak_hormander_check(&build("kolmogorov", &p).unwrap(), &[0.0, 0.0], 0.1).unwrap().holds);
        assert!(weak_hormander_check(&default_model("elliptic2d").unwrap(), &[0.0, 0.0], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn span_rank_agrees_with_scalar_tests(s0 in -2.0..2.0f64, s1 in -1.0..1.0f64, c in -2.0..2.0f64, e in -1.0..1.0f64,
                                               y1 in -2.0..2.0f64, y2 in -2.0..2.0f64) {
            let mut p = BTreeMap::new();
            for (k, v) in [("s0", s0), ("s1", s1), ("c", c), ("e", e)] {
                p.insert(k.to_string(), v);
            }
            let m = build("hormander_trig", &p).unwrap();
            let y = [y1, y2];
            let chk = weak_hormander_check(&m, &y, 0.0).unwrap();
            let (mut s, mut db) = ([0.0; 2], [0.0; 4]);
            m.sigma_field(0).value(&y, &mut s);
            m.drift_field().gradient(&y, &mut db);
            prop_assert!((chk.span_det - s[0] * s[0] * db[2]).abs() < 1e-12 * (1.0 + chk.span_det.abs()));
            prop_assert_eq!(chk.holds, chk.span_det != 0.0);
        }
    }

    #[test]
    fn integration_examples() {
        let g = grid(1.0, 100);
        let m = scalar(cst(1.0), cst(0.7));
        let s = integrate_skeleton(&m, &ControlPath::zero(g.clone(), 1).unwrap(), &[0.5], &g).unwrap();
        assert!((s.terminal()[0] - 1.2).abs() < 1e-14);
        let m = scalar(cst(1.0), cst(0.0));
        let s = integrate_skeleton(&m, &ControlPath::constant(g.clone(), &[1.0]).unwrap(), &[0.5], &g).unwrap();
        assert!((s.terminal()[0] - 1.5).abs() < 1e-14);
        let k = default_model("kolmogorov").unwrap();
        let s = integrate_skeleton(&k, &ControlPath::constant(g.clone(), &[1.0]).unwrap(), &[0.0, 0.0], &g).unwrap();
        for (i, t) in g.iter().enumerate() {
            assert!((s.state(i)[0] - t).abs() < 1e-14);
            assert!((s.state(i)[1] - t * t / 2.0).abs() < 1e-14);
        }
        assert!(s.max_residual < 1e-12);
        let blow = scalar(cst(0.0), var(0) * var(0));
        let g = grid(2.0, 200);
        let r = integrate_skeleton(&blow, &ControlPath::zero(g.clone(), 1).unwrap(), &[1.0], &g);
        assert!(matches!(r, Err(Error::BlowUp { .. })));
    }

    #[test]
    fn synthesis_examples() {
        let id = ModelSpec::new("id", 2, 0, vec![vec![cst(1.0), cst(0.0)], vec![cst(0.0), cst(1.0)]], vec![cst(0.0), cst(0.0)], vec![0.0, 0.0]).unwrap();
        let path = PolynomialPath { coeffs: vec![vec![0.0, 1.0, -2.0], vec![0.0, 0.0, 0.0, 3.0]] };
        let g = grid(1.0, 50);
        let syn = synthesize_control(&id, &path, &[], &g).unwrap();
        for (k, t) in g.iter().enumerate() {
            let v = path.derivative(*t);
            assert!((syn.control.node(k)[0] - v[0]).abs() < 1e-14 && (syn.control.node(k)[1] - v[1]).abs() < 1e-14);
        }
        let m = scalar(cst(2.0), cst(0.5));
        let line = LinePath { from: vec![0.0], to: vec![3.0], horizon: 1.0 };
        let syn = synthesize_control(&m, &line, &[], &g).unwrap();
        assert!(syn.control.values.iter().all(|p| (p - 1.25).abs() < 1e-14));
        assert!((syn.energy - 1.5625).abs() < 1e-12);
    }

    #[test]
    fn round_trip_on_cubic_target() {
        let m = default_model("integrated1d").unwrap();
        let g = grid(1.0, 1000);
        let path = PolynomialPath { coeffs: vec![vec![0.0, 0.5, -1.0, 2.0]] };
        let syn = synthesize_control(&m, &path, &[0.0], &g).unwrap();
        let back = integrate_skeleton(&m, &syn.control, &m.x0, &g).unwrap();
        for (k, t) in g.iter().enumerate() {
            assert!((back.state(k)[0] - path.value(*t)[0]).abs() < 1e-6);
            assert!((back.state(k)[1] - syn.skeleton.state(k)[1]).abs() < 1e-6);
        }
        assert!(syn.skeleton.max_residual < 1e-5);
    }

    #[test]
    fn singular_control_reports_time() {
        let m = scalar(var(0) - cst(0.5), cst(0.0));
        let line = LinePath { from: vec![0.0], to: vec![1.0], horizon: 1.0 };
        match synthesize_control(&m, &line, &[], &grid(1.0, 10)) {
            Err(Error::SingularControl { t, .. }) => assert!((t - 0.5).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn attainability_examples() {
        let m = scalar(cst(1.0), cst(0.3));
        let a = check_attainable(&m, &[0.3], 1.0, 100, 1e-9, None).unwrap();
        assert!(a.attained && a.control.values.iter().all(|v| *v == 0.0));
        let a = check_attainable(&m, &[-2.0], 1.0, 100, 1e-9, None).unwrap();
        assert!(a.attained);
        let dead = scalar(cst(0.0), cst(0.0));
        let r = check_attainable(&dead, &[1.0], 1.0, 100, 1e-9, None);
        assert!(r.map(|a| !a.attained).unwrap_or(true));
    }

    #[test]
    fn lmuh_examples() {
        let t = grid(1.0, 100);
        assert!(check_lmuh(&t, &vec![2.0; 101], 1.0, 0.3));
        let e: Vec<f64> = t.iter().map(|s| s.exp()).collect();
        assert!(check_lmuh(&t, &e, 0.1f64.exp(), 0.1));
        assert!(!check_lmuh(&t, &e, 0.09f64.exp(), 0.1));
        let mut z = vec![1.0; 101];
        z[50] = 0.0;
        assert!(!check_lmuh(&t, &z, 1e300, 0.05));
    }

    proptest! {
        #[test]
        fn lmuh_monotone_in_mu(f in proptest::collection::vec(0.0..5.0f64, 20), mu in 1.0..10.0f64, h in 0.0..1.0f64) {
            let t = grid(1.0, 19);
            if check_lmuh(&t, &f, mu, h) {
                prop_assert!(check_lmuh(&t, &f, mu * 1.5, h));
            }
        }
    }

    #[test]
    fn ellipticity_examples() {
        let g = grid(1.0, 20);
        let id = ModelSpec::new("id", 2, 0, vec![vec![cst(1.0), cst(0.0)], vec![cst(0.0), cst(1.0)]], vec![cst(0.0), cst(0.0)], vec![0.0, 0.0]).unwrap();
        let s = integrate_skeleton(&id, &ControlPath::zero(g.clone(), 2).unwrap(), &[0.0, 0.0], &g).unwrap();
        assert_eq!(uniform_ellipticity(&id, &s, &[], &[], 5, false).unwrap().lambda_min, 1.0);
        let m = ModelSpec::new("quad", 1, 1, vec![vec![cst(1.0) + powi(var(0), 2), cst(0.0)]], vec![cst(0.0), cst(0.0)], vec![-1.0, 0.0]).unwrap();
        let line = LinePath { from: vec![-1.0], to: vec![1.0], horizon: 1.0 };
        let s = synthesize_control(&m, &line, &[0.0], &g).unwrap().skeleton;
        assert!(matches!(uniform_ellipticity(&m, &s, &[-1.0], &[1.0], 5, false), Err(Error::Refused(_))));
        let c = uniform_ellipticity(&m, &s, &[-1.0], &[1.0], 5, true).unwrap();
        assert!((c.lambda_min - 1.0).abs() < 1e-12 && (c.worst_time - 0.5).abs() < 1e-12 && c.positive);
        let v = scalar(var(0), cst(1.0));
        let s = integrate_skeleton(&v, &ControlPath::zero(g.clone(), 1).unwrap(), &[0.0], &g).unwrap();
        assert!(!uniform_ellipticity(&v, &s, &[], &[], 2, false).unwrap().positive);
    }

    fn bm_tube(eta: f64, n: usize, mon: ExitMonitoring) -> TubeEstimate {
        let m = default_model("bm1d").unwrap();
        let ch = GaussianChart::uniform(1.0, 64, 1).unwrap();
        let s = integrate_skeleton(&m, &ControlPath::zero(ch.grid().to_vec(), 1).unwrap(), &m.x0, ch.grid()).unwrap();
        tube_probability(&m, &s, eta, n, &ch, &StreamKey::new(5, "tube"), mon, 1).unwrap()
    }

    #[test]
    fn tube_limits_and_monotonicity() {
        assert_eq!(bm_tube(20.0, 2000, ExitMonitoring::GridOnly).probability, 1.0);
        assert!(bm_tube(1e-3, 2000, ExitMonitoring::BrownianBridge).probability < 1e-6);
        for mon in [ExitMonitoring::GridOnly, ExitMonitoring::BrownianBridge] {
            let mut last = 0.0;
            for eta in [0.3, 0.6, 1.0, 1.5, 2.5] {
                let p = bm_tube(eta, 2000, mon).probability;
                assert!(p >= last);
                last = p;
            }
        }
    }

    #[test]
    fn bridge_monitoring_matches_reflection_series() {
        let est = bm_tube(1.0, 20_000, ExitMonitoring::BrownianBridge);
        let exact = brownian_two_sided_stay(1.0, 1.0, 20);
        assert!((est.probability - exact).abs() < 3.0 * est.std_error, "{} vs {exact}", est.probability);
        let grid_only = bm_tube(1.0, 20_000, ExitMonitoring::GridOnly);
        assert!(grid_only.probability > exact);
    }

    #[test]
    fn rho_delta_examples() {
        let g = grid(1.0, 64);
        assert!((rho_delta(&ControlPath::zero(g.clone(), 1).unwrap(), 0.25) - 0.5).abs() < 1e-15);
        assert!((rho_delta(&ControlPath::constant(g, &[2.0]).unwrap(), 0.25) - 1.0).abs() < 1e-12);
    }
}
