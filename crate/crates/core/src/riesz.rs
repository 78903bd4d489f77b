//! Monte Carlo estimators built on the representation
//! `p_F(x) = E( sum_i d_i Q_d(F - x) W_i )`.
//!
//! A sampler is any `Fn(u64) -> Result<Draw>`: given a path index it returns
//! the value of `F` together with its weights. The estimators below only
//! average kernel-weighted summands, so the same code serves chart
//! functionals, SDE terminal values and localized weights.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::poisson_gradient_into;
use crate::malliavin::{ibp_weight, weight, GaussianChart, SmoothFunctional};
use crate::mc::{run_blocks, CoMoments, Moments, StreamKey, BLOCK};
use crate::sde::{terminal_weight_inputs, ModelSpec};

/// One sample: `F`, the weight `W(F, psi)`, optionally `W(F, G psi)`, and
/// the localization factor `psi` (one when no localizer is used).
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub f: Vec<f64>,
    pub w: Vec<f64>,
    pub wg: Vec<f64>,
    pub mass: f64,
}

#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub workers: usize,
    pub block: usize,
    /// Summands with magnitude above this are counted in the tail report.
    pub tail_threshold: f64,
    /// Optional two-sided winsorization at this upper quantile, e.g. `0.999`.
    pub winsorize: Option<f64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { workers: 1, block: BLOCK, tail_threshold: 100.0, winsorize: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailReport {
    pub max_abs: f64,
    pub threshold: f64,
    pub above: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorResult {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: u64,
    /// Samples discarded because `F` hit the evaluation point exactly.
    pub dropped: u64,
    pub tail: TailReport,
}

impl EstimatorResult {
    /// Number of standard errors separating the estimate from `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target) / self.std_error
    }
}

/// `sum_i d_i Q_d(f - x) w_i`, or `None` when `f == x` in dimension `d >= 2`.
pub fn riesz_summand(f: &[f64], w: &[f64], x: &[f64], scratch: &mut [f64]) -> Result<Option<f64>> {
    let d = f.len();
    for i in 0..d {
        scratch[i] = f[i] - x[i];
    }
    let (diff, grad) = scratch.split_at_mut(d);
    match poisson_gradient_into(d, diff, &mut grad[..d]) {
        Ok(()) => Ok(Some((0..d).map(|i| grad[i] * w[i]).sum())),
        Err(Error::SingularKernel { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Default)]
struct Acc {
    m: Moments,
    dropped: u64,
    max_abs: f64,
    above: u64,
    kept: Vec<f64>,
}

impl Acc {
    fn push(&mut self, v: f64, threshold: f64, keep: bool) {
        self.m.push(v);
        self.max_abs = self.max_abs.max(v.abs());
        if v.abs() > threshold {
            self.above += 1;
        }
        if keep {
            self.kept.push(v);
        }
    }

    fn merge(&mut self, o: Acc) {
        self.m.merge(&o.m);
        self.dropped += o.dropped;
        self.max_abs = self.max_abs.max(o.max_abs);
        self.above += o.above;
        self.kept.extend(o.kept);
    }

    fn finish(self, opts: &EstimatorOptions) -> Result<EstimatorResult> {
        if self.m.n < 2 {
            return Err(Error::NotEnoughSamples(format!("{} usable samples ({} dropped)", self.m.n, self.dropped)));
        }
        let mut m = self.m;
        if let Some(q) = opts.winsorize {
            let mut sorted = self.kept.clone();
            sorted.sort_by(f64::total_cmp);
            let pick = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
            let (lo, hi) = (pick(1.0 - q), pick(q));
            m = Moments::default();
            for v in &self.kept {
                m.push(v.clamp(lo, hi));
            }
        }
        Ok(EstimatorResult {
            value: m.mean,
            std_error: m.std_error(),
            n_samples: m.n,
            dropped: self.dropped,
            tail: TailReport { max_abs: self.max_abs, threshold: opts.tail_threshold, above: self.above },
        })
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::NotEnoughSamples(format!("N = {n}, need at least 2")));
    }
    Ok(())
}

/// Density estimates at every point of `xs` from one shared sample of size `n`.
pub fn estimate_density_grid<S>(sampler: &S, xs: &[Vec<f64>], n: usize, opts: &EstimatorOptions) -> Result<Vec<EstimatorResult>>
where
    S: Fn(u64) -> Result<Draw> + Sync,
{
    check_n(n)?;
    let keep = opts.winsorize.is_some();
    let parts = run_blocks(n, opts.block, opts.workers, |range| {
        let mut accs = vec![Acc::default(); xs.len()];
        let mut scratch = Vec::new();
        for i in range {
            let draw = sampler(i as u64)?;
            scratch.resize(2 * draw.f.len(), 0.0);
            for (acc, x) in accs.iter_mut().zip(xs) {
                if x.len() != draw.f.len() {
                    return Err(Error::DimensionMismatch { what: "evaluation point", expected: draw.f.len(), got: x.len() });
                }
                match riesz_summand(&draw.f, &draw.w, x, &mut scratch)? {
                    Some(v) => acc.push(v, opts.tail_threshold, keep),
                    None => acc.dropped += 1,
                }
            }
        }
        Ok(accs)
    })?;
    let mut total = vec![Acc::default(); xs.len()];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    total.into_iter().map(|a| a.finish(opts)).collect()
}

pub fn estimate_density<S>(sampler: &S, x: &[f64], n: usize, opts: &EstimatorOptions) -> Result<EstimatorResult>
where
    S: Fn(u64) -> Result<Draw> + Sync,
{
    Ok(estimate_density_grid(sampler, &[x.to_vec()], n, opts)?.remove(0))
}

/// Numerator `p_{F,G}(x)`, denominator `p_F(x)` and, when the denominator is
/// more than three standard errors above zero, the ratio `E(G | F = x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionalResult {
    pub numerator: EstimatorResult,
    pub denominator: EstimatorResult,
    pub ratio: Option<f64>,
    pub ratio_std_error: Option<f64>,
}

pub fn estimate_conditional<S>(sampler: &S, x: &[f64], n: usize, opts: &EstimatorOptions) -> Result<ConditionalResult>
where
    S: Fn(u64) -> Result<Draw> + Sync,
{
    check_n(n)?;
    let parts = run_blocks(n, opts.block, opts.workers, |range| {
        let mut co = CoMoments::default();
        let (mut num, mut den) = (Acc::default(), Acc::default());
        let mut scratch = Vec::new();
        for i in range {
            let draw = sampler(i as u64)?;
            if draw.wg.len() != draw.f.len() {
                return Err(Error::MissingDerivatives("conditional estimation needs W(F, G)"));
            }
            scratch.resize(2 * draw.f.len(), 0.0);
            let a = riesz_summand(&draw.f, &draw.wg, x, &mut scratch)?;
            let b = riesz_summand(&draw.f, &draw.w, x, &mut scratch)?;
            match (a, b) {
                (Some(a), Some(b)) => {
                    co.push(a, b);
                    num.push(a, opts.tail_threshold, false);
                    den.push(b, opts.tail_threshold, false);
                }
                _ => {
                    num.dropped += 1;
                    den.dropped += 1;
                }
            }
        }
        Ok((co, num, den))
    })?;
    let mut co = CoMoments::default();
    let (mut num, mut den) = (Acc::default(), Acc::default());
    for (c, a, b) in parts {
        co.merge(&c);
        num.merge(a);
        den.merge(b);
    }
    let plain = EstimatorOptions { winsorize: None, ..opts.clone() };
    let numerator = num.finish(&plain)?;
    let denominator = den.finish(&plain)?;
    let (mut ratio, mut ratio_std_error) = (None, None);
    if denominator.value > 3.0 * denominator.std_error {
        let r = numerator.value / denominator.value;
        let var = (co.a.variance() - 2.0 * r * co.covariance() + r * r * co.b.variance()) / co.a.n as f64;
        ratio = Some(r);
        ratio_std_error = Some(var.max(0.0).sqrt() / denominator.value);
    }
    Ok(ConditionalResult { numerator, denominator, ratio, ratio_std_error })
}

/// Density of `F` under `psi(Theta) dP` together with the mass `E psi(Theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalizedResult {
    pub density: EstimatorResult,
    pub mass: EstimatorResult,
}

pub fn estimate_density_localized<S>(sampler: &S, x: &[f64], n: usize, opts: &EstimatorOptions) -> Result<LocalizedResult>
where
    S: Fn(u64) -> Result<Draw> + Sync,
{
    check_n(n)?;
    let keep = opts.winsorize.is_some();
    let parts = run_blocks(n, opts.block, opts.workers, |range| {
        let (mut dens, mut mass) = (Acc::default(), Acc::default());
        let mut scratch = Vec::new();
        for i in range {
            let draw = sampler(i as u64)?;
            scratch.resize(2 * draw.f.len(), 0.0);
            mass.push(draw.mass, f64::INFINITY, false);
            match riesz_summand(&draw.f, &draw.w, x, &mut scratch)? {
                Some(v) => dens.push(v, opts.tail_threshold, keep),
                None => dens.dropped += 1,
            }
        }
        Ok((dens, mass))
    })?;
    let (mut dens, mut mass) = (Acc::default(), Acc::default());
    for (a, b) in parts {
        dens.merge(a);
        mass.merge(b);
    }
    let density = dens.finish(opts)?;
    let mass = mass.finish(&EstimatorOptions { winsorize: None, ..opts.clone() })?;
    Ok(LocalizedResult { density, mass })
}

/// Builds a [`Draw`] for a chart functional: weights `W(F, psi)` and, when
/// `g` is given, `W(F, G psi)`.
pub fn chart_draw(
    chart: &GaussianChart,
    z: &[f64],
    f: &SmoothFunctional,
    g: Option<&SmoothFunctional>,
    loc: Option<(&SmoothFunctional, f64)>,
) -> Result<Draw> {
    let one = SmoothFunctional::constant(vec![1.0], f.n);
    let w = ibp_weight(chart, z, f, &one, loc)?;
    let wg = match g {
        Some(g) => ibp_weight(chart, z, f, g, loc)?,
        None => Vec::new(),
    };
    let mass = match loc {
        Some((theta, a)) => crate::kernels::localizer(a, theta.value[0]),
        None => 1.0,
    };
    Ok(Draw { f: f.value.clone(), w, wg, mass })
}

/// [`Draw`] for the X-components of an Euler terminal value driven by `z`.
pub fn terminal_draw(model: &ModelSpec, chart: &GaussianChart, z: &[f64]) -> Result<Draw> {
    let outputs: Vec<usize> = (0..model.d).collect();
    let (f, inp) = terminal_weight_inputs(model, chart, z, &outputs)?;
    let w = weight(&inp)?;
    Ok(Draw { f, w, wg: Vec::new(), mass: 1.0 })
}

/// Riesz estimates of the density of `X_T` at each point of `xs`, paths
/// drawn from `key`.
pub fn terminal_density_grid(
    model: &ModelSpec,
    chart: &GaussianChart,
    xs: &[Vec<f64>],
    n: usize,
    key: &StreamKey,
    opts: &EstimatorOptions,
) -> Result<Vec<EstimatorResult>> {
    let sampler = |i: u64| {
        let mut z = vec![0.0; chart.n()];
        key.normals(i, &mut z);
        terminal_draw(model, chart, &z)
    };
    estimate_density_grid(&sampler, xs, n, opts)
}
