//! Euler scheme with exact pathwise derivatives of the discrete recursion.
//!
//! One step reads `z' = z + sum_j S_j(z) h zeta_j + B(z) dt` with
//! `h = sqrt(dt)`. Its linearisation is described by
//! `A = I + sum_j dS_j h zeta_j + dB dt`, the coordinate directions
//! `c_j = S_j h`, the curvature `T = sum_j d2S_j h zeta_j + d2B dt` and the
//! mixed terms `E_j = dS_j h`.

use crate::error::{Error, Result};
use crate::malliavin::{GaussianChart, SmoothFunctional, WeightInputs};

use super::model::{ModelSpec, StepEval};

/// States `z_0, ..., z_N` of one Euler path, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub dim: usize,
    pub states: Vec<f64>,
}

impl Path {
    pub fn steps(&self) -> usize {
        self.states.len() / self.dim - 1
    }
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
    pub fn terminal(&self) -> &[f64] {
        self.state(self.steps())
    }
}

fn check_coords(chart: &GaussianChart, model: &ModelSpec, z: &[f64]) -> Result<()> {
    if chart.m() != model.m {
        return Err(Error::DimensionMismatch { what: "driving components", expected: model.m, got: chart.m() });
    }
    if z.len() != chart.n() {
        return Err(Error::DimensionMismatch { what: "Gaussian coordinates", expected: chart.n(), got: z.len() });
    }
    Ok(())
}

#[inline]
fn euler_step(model: &ModelSpec, ws: &StepEval, dt: f64, zeta: &[f64], state: &mut [f64]) {
    let dim = model.dim();
    let h = dt.sqrt();
    for i in 0..dim {
        let mut inc = ws.b[i] * dt;
        for (j, zj) in zeta.iter().enumerate() {
            inc += ws.s[j * dim + i] * h * zj;
        }
        state[i] += inc;
    }
}

fn check_finite(state: &[f64], step: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}

/// Euler path started at `start` and driven by the coordinates `z`.
pub fn euler_from(model: &ModelSpec, start: &[f64], chart: &GaussianChart, z: &[f64]) -> Result<Path> {
    check_coords(chart, model, z)?;
    let (dim, m) = (model.dim(), model.m);
    if start.len() != dim {
        return Err(Error::DimensionMismatch { what: "start state", expected: dim, got: start.len() });
    }
    let mut ws = StepEval::new(dim, m);
    let mut states = Vec::with_capacity((chart.steps() + 1) * dim);
    states.extend_from_slice(start);
    let mut cur = start.to_vec();
    for k in 0..chart.steps() {
        model.eval(&cur, 0, &mut ws);
        euler_step(model, &ws, chart.dt(k), &z[k * m..(k + 1) * m], &mut cur);
        check_finite(&cur, k + 1)?;
        states.extend_from_slice(&cur);
    }
    Ok(Path { dim, states })
}

/// Euler path from the model's initial point.
pub fn euler_simulate(model: &ModelSpec, chart: &GaussianChart, z: &[f64]) -> Result<Path> {
    euler_from(model, &model.x0, chart, z)
}

/// Linearisation of one step at the current state.
struct StepLin {
    a: Vec<f64>,
    c: Vec<f64>,
    e: Vec<f64>,
    t: Vec<f64>,
}

impl StepLin {
    fn new(dim: usize, m: usize) -> Self {
        StepLin { a: vec![0.0; dim * dim], c: vec![0.0; m * dim], e: vec![0.0; m * dim * dim], t: vec![0.0; dim * dim * dim] }
    }

    fn fill(&mut self, ws: &StepEval, dim: usize, m: usize, dt: f64, zeta: &[f64], second: bool) {
        let h = dt.sqrt();
        let d2 = dim * dim;
        for p in 0..d2 {
            let mut v = ws.db[p] * dt;
            for j in 0..m {
                v += ws.ds[j * d2 + p] * h * zeta[j];
            }
            self.a[p] = v;
        }
        for i in 0..dim {
            self.a[i * dim + i] += 1.0;
        }
        for p in 0..m * dim {
            self.c[p] = ws.s[p] * h;
        }
        if second {
            for p in 0..m * d2 {
                self.e[p] = ws.ds[p] * h;
            }
            for p in 0..d2 * dim {
                let mut v = ws.d2b[p] * dt;
                for j in 0..m {
                    v += ws.d2s[j * d2 * dim + p] * h * zeta[j];
                }
                self.t[p] = v;
            }
        }
    }
}

/// Terminal state with first (and optionally second) derivatives of every
/// state component with respect to every coordinate.
#[derive(Debug, Clone)]
pub struct Tangent {
    pub path: Path,
    /// `jac[i * n + k]`.
    pub jac: Vec<f64>,
    /// `hess[(i * n + k) * n + l]`.
    pub hess: Option<Vec<f64>>,
}

/// Full forward tangent recursion. Cost is `O(N^3)` with second derivatives,
/// so this is meant for short charts, validation and conditional inner paths.
pub fn tangent_from(model: &ModelSpec, start: &[f64], chart: &GaussianChart, z: &[f64], second: bool) -> Result<Tangent> {
    check_coords(chart, model, z)?;
    let (dim, m, n) = (model.dim(), model.m, chart.n());
    if start.len() != dim {
        return Err(Error::DimensionMismatch { what: "start state", expected: dim, got: start.len() });
    }
    let skip_second = !second || (model.second_derivatives_vanish() && model.additive_noise());
    let mut ws = StepEval::new(dim, m);
    let mut lin = StepLin::new(dim, m);
    let mut v = vec![0.0; dim * n];
    let mut hess = if second { Some(vec![0.0; dim * n * n]) } else { None };
    let mut states = Vec::with_capacity((chart.steps() + 1) * dim);
    states.extend_from_slice(start);
    let mut cur = start.to_vec();
    let mut tmp = vec![0.0; dim];
    let (mut vk, mut vl) = (vec![0.0; dim], vec![0.0; dim]);
    for s in 0..chart.steps() {
        let zeta = &z[s * m..(s + 1) * m];
        model.eval(&cur, if skip_second { 1 } else { 2 }, &mut ws);
        lin.fill(&ws, dim, m, chart.dt(s), zeta, !skip_second);
        let past = s * m;
        if let (Some(k2), false) = (hess.as_mut(), skip_second) {
            for k in 0..past {
                for i in 0..dim {
                    vk[i] = v[i * n + k];
                }
                for l in 0..past {
                    for i in 0..dim {
                        vl[i] = v[i * n + l];
                    }
                    for i in 0..dim {
                        let mut acc = 0.0;
                        for a in 0..dim {
                            acc += lin.a[i * dim + a] * k2[(a * n + k) * n + l];
                            for b in 0..dim {
                                acc += lin.t[(i * dim + a) * dim + b] * vk[a] * vl[b];
                            }
                        }
                        tmp[i] = acc;
                    }
                    for i in 0..dim {
                        k2[(i * n + k) * n + l] = tmp[i];
                    }
                }
                for j in 0..m {
                    let l = past + j;
                    for i in 0..dim {
                        let mut acc = 0.0;
                        for a in 0..dim {
                            acc += lin.e[(j * dim + i) * dim + a] * vk[a];
                        }
                        k2[(i * n + k) * n + l] = acc;
                        k2[(i * n + l) * n + k] = acc;
                    }
                }
            }
        }
        for k in 0..past {
            for i in 0..dim {
                tmp[i] = (0..dim).map(|a| lin.a[i * dim + a] * v[a * n + k]).sum();
            }
            for i in 0..dim {
                v[i * n + k] = tmp[i];
            }
        }
        for j in 0..m {
            for i in 0..dim {
                v[i * n + past + j] = lin.c[j * dim + i];
            }
        }
        euler_step(model, &ws, chart.dt(s), zeta, &mut cur);
        check_finite(&cur, s + 1)?;
        states.extend_from_slice(&cur);
    }
    Ok(Tangent { path: Path { dim, states }, jac: v, hess })
}

/// `F = (z_N)_{outputs}` as a [`SmoothFunctional`] with exact discrete
/// first and second derivatives.
pub fn tangent_derivatives(model: &ModelSpec, chart: &GaussianChart, z: &[f64], outputs: &[usize]) -> Result<SmoothFunctional> {
    let t = tangent_from(model, &model.x0, chart, z, true)?;
    select_outputs(&t, outputs, chart.n())
}

pub(crate) fn select_outputs(t: &Tangent, outputs: &[usize], n: usize) -> Result<SmoothFunctional> {
    let dim = t.path.dim;
    if let Some(&bad) = outputs.iter().find(|&&o| o >= dim) {
        return Err(Error::InvalidArgument(format!("output component {bad} out of range")));
    }
    let value = outputs.iter().map(|&o| t.path.terminal()[o]).collect();
    let jac = outputs.iter().flat_map(|&o| t.jac[o * n..(o + 1) * n].iter().copied()).collect();
    let hess = t.hess.as_ref().map(|h| outputs.iter().flat_map(|&o| h[o * n * n..(o + 1) * n * n].iter().copied()).collect());
    SmoothFunctional::new(value, n, jac, hess, None)
}

/// Weight ingredients for `F = (z_N)_{outputs}` and `G = 1`, computed by one
/// forward and one backward sweep in `O(N)` time and memory.
pub fn terminal_weight_inputs(model: &ModelSpec, chart: &GaussianChart, z: &[f64], outputs: &[usize]) -> Result<(Vec<f64>, WeightInputs<f64>)> {
    check_coords(chart, model, z)?;
    let (dim, m, steps) = (model.dim(), model.m, chart.steps());
    let d = outputs.len();
    if let Some(&bad) = outputs.iter().find(|&&o| o >= dim) {
        return Err(Error::InvalidArgument(format!("output component {bad} out of range")));
    }
    let curv = !model.second_derivatives_vanish();
    let mixed = !model.additive_noise();
    let second = curv || mixed;
    let d2 = dim * dim;
    let mut ws = StepEval::new(dim, m);
    let mut lin = StepLin::new(dim, m);
    let mut a_all = vec![0.0; steps * d2];
    let mut c_all = vec![0.0; steps * m * dim];
    let mut e_all = if mixed { vec![0.0; steps * m * d2] } else { Vec::new() };
    let mut t_all = if curv { vec![0.0; steps * d2 * dim] } else { Vec::new() };
    let mut p_all = if second { vec![0.0; (steps + 1) * d2] } else { Vec::new() };
    let mut cur = model.x0.clone();
    let mut ap = vec![0.0; d2];
    for s in 0..steps {
        let zeta = &z[s * m..(s + 1) * m];
        model.eval(&cur, if second { 2 } else { 1 }, &mut ws);
        lin.fill(&ws, dim, m, chart.dt(s), zeta, second);
        a_all[s * d2..(s + 1) * d2].copy_from_slice(&lin.a);
        c_all[s * m * dim..(s + 1) * m * dim].copy_from_slice(&lin.c);
        if mixed {
            e_all[s * m * d2..(s + 1) * m * d2].copy_from_slice(&lin.e);
        }
        if curv {
            t_all[s * d2 * dim..(s + 1) * d2 * dim].copy_from_slice(&lin.t);
        }
        if second {
            let (prev, next) = p_all.split_at_mut((s + 1) * d2);
            let p = &prev[s * d2..];
            let pn = &mut next[..d2];
            for i in 0..dim {
                for b in 0..dim {
                    ap[i * dim + b] = (0..dim).map(|a| lin.a[i * dim + a] * p[a * dim + b]).sum();
                }
            }
            for i in 0..dim {
                for k in 0..dim {
                    let mut v: f64 = (0..dim).map(|b| ap[i * dim + b] * lin.a[k * dim + b]).sum();
                    for j in 0..m {
                        v += lin.c[j * dim + i] * lin.c[j * dim + k];
                    }
                    pn[i * dim + k] = v;
                }
            }
        }
        euler_step(model, &ws, chart.dt(s), zeta, &mut cur);
        check_finite(&cur, s + 1)?;
    }

    let mut sigma = vec![0.0; d * d];
    let mut zj = vec![0.0; d];
    let mut trace = vec![0.0; d];
    let mut m3 = vec![0.0; d * d * d];
    // gnext[a * dim + i] = d (z_N)_{outputs[a]} / d (z_{s+1})_i
    let mut gnext = vec![0.0; d * dim];
    for (a, &o) in outputs.iter().enumerate() {
        gnext[a * dim + o] = 1.0;
    }
    let mut gcur = vec![0.0; d * dim];
    let mut psi = vec![0.0; m * d];
    let mut u = vec![0.0; dim * d];
    let mut gt = vec![0.0; d * dim * dim];
    for s in (0..steps).rev() {
        let a_s = &a_all[s * d2..(s + 1) * d2];
        let c_s = &c_all[s * m * dim..(s + 1) * m * dim];
        for j in 0..m {
            let zeta = z[s * m + j];
            for a in 0..d {
                let v: f64 = (0..dim).map(|i| gnext[a * dim + i] * c_s[j * dim + i]).sum();
                psi[j * d + a] = v;
                zj[a] += zeta * v;
            }
            for a in 0..d {
                for b in 0..d {
                    sigma[a * d + b] += psi[j * d + a] * psi[j * d + b];
                }
            }
        }
        for a in 0..d {
            for k in 0..dim {
                gcur[a * dim + k] = (0..dim).map(|i| gnext[a * dim + i] * a_s[i * dim + k]).sum();
            }
        }
        if second {
            let p_s = &p_all[s * d2..(s + 1) * d2];
            for p in 0..dim {
                for c in 0..d {
                    u[p * d + c] = (0..dim).map(|q| p_s[p * dim + q] * gcur[c * dim + q]).sum();
                }
            }
            if curv {
                let t_s = &t_all[s * d2 * dim..(s + 1) * d2 * dim];
                // gt[(a * dim + p) * dim + q] = sum_i gnext[a, i] T_s[i, p, q]
                for a in 0..d {
                    for pq in 0..d2 {
                        gt[a * d2 + pq] = (0..dim).map(|i| gnext[a * dim + i] * t_s[i * d2 + pq]).sum();
                    }
                }
                for a in 0..d {
                    trace[a] += (0..d2).map(|pq| gt[a * d2 + pq] * p_s[pq]).sum::<f64>();
                    for b in 0..d {
                        for c in 0..d {
                            let mut v = 0.0;
                            for p in 0..dim {
                                for q in 0..dim {
                                    v += gt[(a * dim + p) * dim + q] * u[p * d + c] * u[q * d + b];
                                }
                            }
                            m3[(a * d + b) * d + c] += v;
                        }
                    }
                }
            }
            if mixed {
                let e_s = &e_all[s * m * d2..(s + 1) * m * d2];
                for j in 0..m {
                    // ge[a * dim + p] = sum_i gnext[a, i] E_j[i, p]
                    for a in 0..d {
                        for p in 0..dim {
                            gt[a * dim + p] = (0..dim).map(|i| gnext[a * dim + i] * e_s[(j * dim + i) * dim + p]).sum();
                        }
                    }
                    for a in 0..d {
                        for b in 0..d {
                            let eb: f64 = (0..dim).map(|p| gt[a * dim + p] * u[p * d + b]).sum();
                            for c in 0..d {
                                let ec: f64 = (0..dim).map(|p| gt[a * dim + p] * u[p * d + c]).sum();
                                m3[(a * d + b) * d + c] += eb * psi[j * d + c] + ec * psi[j * d + b];
                            }
                        }
                    }
                }
            }
        }
        std::mem::swap(&mut gnext, &mut gcur);
    }
    let value = outputs.iter().map(|&o| cur[o]).collect();
    Ok((value, WeightInputs { d, g: 1.0, sigma, zj, trace, m3, dg_df: vec![0.0; d], loc: None }))
}
