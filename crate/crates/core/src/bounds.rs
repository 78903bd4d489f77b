//! Quantitative lower bounds for densities.
//!
//! Everything here rests on the decomposition `F = F_past + G + R`, where
//! `G` is conditionally Gaussian with covariance `C_delta` and `R` is small.
//! The perturbation constants `C_d`, `l_d`, `q_d` are only known to exist, so
//! they travel in a [`ConstantsProfile`] that records where they came from.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::kernels::{gaussian_density, GaussianSpec};
use crate::linalg::{mahalanobis, max_eigenvalue, min_eigenvalue, psd_sqrt};
use crate::malliavin::GaussianChart;
use crate::mc::{run_blocks, Moments, StreamKey, BLOCK};
use crate::quadrature::gauss_hermite_normal;
use crate::riesz::{terminal_density_grid, EstimatorOptions, EstimatorResult};
use crate::sde::{
    check_h1_shape, conditional_theta_gated, decompose_hormander, decompose_ito, Decomposition, ModelSpec, ThetaEstimate,
};
use crate::skeleton::{
    check_attainable, check_lmuh, integrate_skeleton, rho_delta, tube_probability, uniform_ellipticity, weak_hormander_check,
    ControlPath, ExitMonitoring, SkeletonPath,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Literal,
    Calibrated,
}

/// Details of a calibration run, kept alongside the fitted constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    /// Least-squares `C_d` before the safety factor and coverage step.
    pub c_fit: f64,
    pub ell_fit: f64,
    pub safety: f64,
    pub family_size: usize,
    /// Largest `gap / epsilon` over the family with the final constants.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsProfile {
    pub d: usize,
    pub c_d: f64,
    pub ell_d: f64,
    pub q_d: u32,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<CalibrationFit>,
}

impl ConstantsProfile {
    /// `C_d = 1`, `l_d = 1`, `q_d = d + 1`.
    pub fn literal(d: usize) -> Self {
        ConstantsProfile { d, c_d: 1.0, ell_d: 1.0, q_d: d as u32 + 1, provenance: Provenance::Literal, fit: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("constants profile: d must be positive".into()));
        }
        if !(self.c_d > 0.0 && self.c_d.is_finite()) || !(self.ell_d > 0.0 && self.ell_d.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "constants profile: C_d = {} and l_d = {} must be positive and finite",
                self.c_d, self.ell_d
            )));
        }
        if self.q_d < 2 {
            return Err(Error::InvalidArgument(format!("constants profile: q_d = {} must be at least 2", self.q_d)));
        }
        Ok(())
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        self.validate()?;
        if self.d != d {
            return Err(Error::DimensionMismatch { what: "constants profile", expected: d, got: self.d });
        }
        Ok(())
    }
}

fn det_checked(m: &DMatrix<f64>, name: &str) -> Result<f64> {
    let det = m.clone().cholesky().map(|c| c.l().diagonal().iter().map(|v| v * v).product::<f64>()).unwrap_or(0.0);
    if !(det > 0.0 && det.is_finite()) {
        return Err(Error::SingularMatrix { name: name.to_string(), det: m.determinant() });
    }
    Ok(det)
}

/// `eps(M_G, R) = C_d (det M_G)^{-1/2} (1 + ||R_bar||)^{l_d} ||R_bar||`.
pub fn epsilon_bound(m_g: &DMatrix<f64>, r_norm: f64, k: &ConstantsProfile) -> Result<f64> {
    k.check_dim(m_g.nrows())?;
    if !(r_norm >= 0.0) {
        return Err(Error::InvalidArgument(format!("Sobolev norm must be nonnegative, got {r_norm}")));
    }
    let det = det_checked(m_g, "M_G")?;
    Ok(k.c_d / det.sqrt() * (1.0 + r_norm).powf(k.ell_d) * r_norm)
}

/// One point of a density estimate compared against `g_{M_G}(y - x) +- eps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichPoint {
    pub y: Vec<f64>,
    pub gaussian: f64,
    pub estimate: f64,
    pub std_error: f64,
    /// `p(y) >= g(y - x) - eps` up to three standard errors.
    pub lower_ok: bool,
    /// `|p(y) - g(y - x)| <= eps * gamma_sq` up to three standard errors.
    pub two_sided_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub eps: f64,
    pub gamma_sq: f64,
    pub points: Vec<SandwichPoint>,
    pub violations: usize,
}

/// Checks the one-sided and two-sided perturbation inequalities at every
/// estimate `(y, value, std_error)`. `gaussian` is `N(x, M_G)`.
pub fn density_sandwich(gaussian: &GaussianSpec, eps: f64, gamma_sq: f64, estimates: &[(Vec<f64>, f64, f64)]) -> Result<SandwichReport> {
    let mut points = Vec::with_capacity(estimates.len());
    let mut violations = 0;
    for (y, est, se) in estimates {
        let g = gaussian_density(gaussian, y)?;
        let slack = 3.0 * se;
        let lower_ok = *est + slack >= g - eps;
        let two_sided_ok = (est - g).abs() <= eps * gamma_sq + slack;
        if !(lower_ok && two_sided_ok) {
            violations += 1;
        }
        points.push(SandwichPoint { y: y.clone(), gaussian: g, estimate: *est, std_error: *se, lower_ok, two_sided_ok });
    }
    Ok(SandwichReport { eps, gamma_sq, points, violations })
}

/// `a(r) = 1 ^ [C_d 2^{l_d + 1} (2 pi)^{d/2} e^{r^2}]^{-1}`.
pub fn a_of_r(r: f64, d: usize, k: &ConstantsProfile) -> f64 {
    let denom = k.c_d * 2f64.powf(k.ell_d + 1.0) * (2.0 * PI).powf(d as f64 / 2.0) * (r * r).exp();
    (1.0 / denom).min(1.0)
}

/// `|v|_C = |C^{-1/2} v|`, or `None` when `C` is not positive definite.
pub fn delta_norm(c: &DMatrix<f64>, v: &[f64]) -> Option<f64> {
    mahalanobis(c, v, "C_delta").ok().map(f64::sqrt)
}

/// Membership in `Gamma_{delta,r}(y)`: `|F_past - y|_delta <= r`,
/// `det C_delta != 0` and `theta <= a(r)`.
pub fn gamma_indicator(f_past: &[f64], c_delta: &DMatrix<f64>, theta: f64, y: &[f64], r: f64, k: &ConstantsProfile) -> bool {
    let v: Vec<f64> = f_past.iter().zip(y).map(|(a, b)| a - b).collect();
    match delta_norm(c_delta, &v) {
        Some(dist) => dist <= r * (1.0 + 1e-12) && theta <= a_of_r(r, y.len(), k),
        None => false,
    }
}

/// Prefactor `(2 e^{r^2} (2 pi)^{d/2})^{-1}` of the positivity bound.
pub fn thpos_prefactor(r: f64, d: usize) -> f64 {
    1.0 / (2.0 * (r * r).exp() * (2.0 * PI).powf(d as f64 / 2.0))
}

/// A perturbation instance `F = x + G + R` with its observed density gap.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInstance {
    pub m_g: DMatrix<f64>,
    /// `||M_G^{-1/2} R||_{2, q_d}`.
    pub r_norm: f64,
    /// `sup_y |p_F(y) - g_{M_G}(y - x)|`.
    pub gap: f64,
}

/// Fits `log(gap sqrt(det M_G) / r) = log C + l log(1 + r)` by least
/// squares, multiplies `C` by `safety`, then raises `C` until every
/// instance satisfies `gap <= eps`. `q_d` is `d + 1`.
pub fn calibrate_constants(d: usize, family: &[CalibrationInstance], safety: f64) -> Result<ConstantsProfile> {
    if family.len() < 5 {
        return Err(Error::Refused(format!("calibration needs at least 5 instances, got {}", family.len())));
    }
    if !(safety >= 1.0) {
        return Err(Error::InvalidArgument(format!("safety factor must be at least 1, got {safety}")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut scaled = Vec::with_capacity(family.len());
    for inst in family {
        if inst.m_g.nrows() != d {
            return Err(Error::DimensionMismatch { what: "calibration instance", expected: d, got: inst.m_g.nrows() });
        }
        let det = det_checked(&inst.m_g, "M_G")?;
        let base = inst.r_norm / det.sqrt();
        scaled.push((base, inst.r_norm, inst.gap));
        if inst.r_norm > 0.0 && inst.gap > 0.0 {
            xs.push((1.0 + inst.r_norm).ln());
            ys.push((inst.gap / base).ln());
        }
    }
    let mut profile = ConstantsProfile::literal(d);
    if xs.len() < 2 {
        return Ok(profile);
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let mut ell = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    if !(ell > 0.0) {
        ell = profile.ell_d;
    }
    let log_c = my - ell * mx;
    let c_fit = log_c.exp();
    let mut c = safety * c_fit;
    for (base, r, gap) in &scaled {
        let eps1 = base * (1.0 + r).powf(ell);
        if *gap > c * eps1 {
            c = gap / eps1;
        }
    }
    let max_ratio = scaled.iter().map(|(b, r, g)| if *b > 0.0 { g / (c * b * (1.0 + r).powf(ell)) } else { 0.0 }).fold(0.0, f64::max);
    profile.c_d = c;
    profile.ell_d = ell;
    profile.provenance = Provenance::Calibrated;
    profile.fit = Some(CalibrationFit { c_fit, ell_fit: ell, safety, family_size: family.len(), max_ratio });
    Ok(profile)
}

/// Exact density of `F = Z + eps (Z^2 - 1)` for standard normal `Z`.
pub fn quadratic_pushforward_density(eps: f64, y: f64) -> f64 {
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    if eps == 0.0 {
        return phi(y);
    }
    let disc = 1.0 + 4.0 * eps * (eps + y);
    if disc <= 0.0 {
        return 0.0;
    }
    let s = disc.sqrt();
    [(-1.0 + s) / (2.0 * eps), (-1.0 - s) / (2.0 * eps)].iter().map(|z| phi(*z) / s).sum()
}

/// Calibration instance for `F = Z + eps (Z^2 - 1)`, `M_G = 1`, with the
/// Sobolev norm of `R = eps (Z^2 - 1)` by Gauss-Hermite quadrature and the gap
/// as a supremum over the grid `-6, -5.99, ..., 6`.
pub fn quadratic_family_instance(eps: f64, q: u32) -> CalibrationInstance {
    let rule = gauss_hermite_normal(64);
    let qf = q as f64;
    let moment: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(z, w)| w * ((eps * (z * z - 1.0)).abs().powf(qf) + (2.0 * eps * z).abs().powf(qf) + (2.0 * eps).abs().powf(qf)))
        .sum();
    let gap = (0..=1200)
        .map(|k| {
            let y = -6.0 + 0.01 * k as f64;
            let g = (-0.5 * y * y).exp() / (2.0 * PI).sqrt();
            (quadratic_pushforward_density(eps, y) - g).abs()
        })
        .fold(0.0, f64::max);
    CalibrationInstance { m_g: DMatrix::identity(1, 1), r_norm: moment.powf(1.0 / qf), gap }
}

/// The past of one outer sample: `F_past`, `C_delta`, and whether the
/// sample lies in the conditioning event of the calling pipeline.
#[derive(Debug, Clone)]
pub struct OuterDraw {
    pub f_past: Vec<f64>,
    pub c_delta: DMatrix<f64>,
    pub in_event: bool,
    pub decomposition: Option<Decomposition>,
}

/// Produces outer samples of a decomposition and nested `theta` estimates.
pub trait DecompositionSource: Sync {
    fn dim(&self) -> usize;
    fn delta(&self) -> Option<f64> {
        None
    }
    fn outer(&self, i: u64) -> Result<OuterDraw>;
    fn theta(&self, draw: &OuterDraw, q: u32, n_inner: usize, key: &StreamKey, gate: f64) -> Result<ThetaEstimate>;
}

/// `F = x + G_past + G` with independent centred Gaussians: `R = 0`, so
/// `theta = 0` and the density of `F` is `g_{M_past + M}(y - x)`.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    pub x: Vec<f64>,
    pub past_cov: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    past_root: DMatrix<f64>,
    key: StreamKey,
}

impl GaussianSource {
    pub fn new(x: Vec<f64>, past_cov: DMatrix<f64>, cov: DMatrix<f64>, key: StreamKey) -> Result<Self> {
        let d = x.len();
        for (m, name) in [(&past_cov, "past covariance"), (&cov, "covariance")] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch { what: "Gaussian source covariance", expected: d, got: m.nrows() });
            }
            if min_eigenvalue(m) < -1e-12 * max_eigenvalue(m).abs().max(1.0) {
                return Err(Error::InvalidArgument(format!("{name} is not positive semidefinite")));
            }
        }
        let past_root = psd_sqrt(&past_cov);
        Ok(GaussianSource { x, past_cov, cov, past_root, key })
    }

    /// Density of `F` at `y`.
    pub fn density(&self, y: &[f64]) -> Result<f64> {
        let total = &self.past_cov + &self.cov;
        gaussian_density(&GaussianSpec::new(self.x.clone(), total.transpose().iter().copied().collect())?, y)
    }
}

impl DecompositionSource for GaussianSource {
    fn dim(&self) -> usize {
        self.x.len()
    }

    fn outer(&self, i: u64) -> Result<OuterDraw> {
        let d = self.x.len();
        let mut z = vec![0.0; d];
        self.key.normals(i, &mut z);
        let f_past = (0..d).map(|a| self.x[a] + (0..d).map(|b| self.past_root[(a, b)] * z[b]).sum::<f64>()).collect();
        Ok(OuterDraw { f_past, c_delta: self.cov.clone(), in_event: true, decomposition: None })
    }

    fn theta(&self, _draw: &OuterDraw, q: u32, _n_inner: usize, _key: &StreamKey, _gate: f64) -> Result<ThetaEstimate> {
        Ok(ThetaEstimate { q, value: 0.0, std_error: 0.0, inner_samples: 0, rejected_early: false })
    }
}

/// Which decomposition of the Euler scheme to use.
#[derive(Debug, Clone)]
pub enum DecompositionKind {
    /// `F = X_T`, `G` the frozen-coefficient Ito increment.
    Ito,
    /// `F = X_T - x_T(phi)` for the degenerate two-dimensional model.
    Hormander { skel_past: Vec<f64>, skel_end: Vec<f64> },
}

/// Optional restriction of the outer samples to an event.
#[derive(Debug, Clone)]
pub enum OuterEvent {
    All,
    /// `|Z_{T-delta} - centre| < radius` on the full state.
    StateBall { centre: Vec<f64>, radius: f64 },
    /// `|F_{T-delta}| < radius`.
    PastBall { radius: f64 },
}

/// Outer samples of an SDE decomposition at lag `delta`.
#[derive(Debug)]
pub struct ModelSource<'a> {
    pub model: &'a ModelSpec,
    pub chart: &'a GaussianChart,
    pub delta: f64,
    pub kind: DecompositionKind,
    pub event: OuterEvent,
    pub key: StreamKey,
    frozen: OnceLock<ThetaEstimate>,
}

impl<'a> ModelSource<'a> {
    pub fn new(model: &'a ModelSpec, chart: &'a GaussianChart, delta: f64, kind: DecompositionKind, event: OuterEvent, key: StreamKey) -> Self {
        ModelSource { model, chart, delta, kind, event, key, frozen: OnceLock::new() }
    }

    fn outer_coords(&self) -> usize {
        let k = (self.delta / self.chart.horizon() * self.chart.steps() as f64).round() as usize;
        self.chart.steps().saturating_sub(k) * self.model.m
    }
}

impl DecompositionSource for ModelSource<'_> {
    fn dim(&self) -> usize {
        self.model.d
    }

    fn delta(&self) -> Option<f64> {
        Some(self.delta)
    }

    fn outer(&self, i: u64) -> Result<OuterDraw> {
        let mut z = vec![0.0; self.chart.n()];
        let outer = self.outer_coords();
        self.key.normals(i, &mut z[..outer]);
        let dec = match &self.kind {
            DecompositionKind::Ito => decompose_ito(self.model, self.chart, &z, self.delta)?,
            DecompositionKind::Hormander { skel_past, skel_end } => {
                decompose_hormander(self.model, self.chart, &z, self.delta, skel_past, skel_end)?
            }
        };
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let in_event = match &self.event {
            OuterEvent::All => true,
            OuterEvent::StateBall { centre, radius } => {
                let diff: Vec<f64> = dec.outer_state.iter().zip(centre).map(|(a, b)| a - b).collect();
                norm(&diff) < *radius
            }
            OuterEvent::PastBall { radius } => norm(&dec.f_past) < *radius,
        };
        Ok(OuterDraw { f_past: dec.f_past.clone(), c_delta: dec.c_delta.clone(), in_event, decomposition: Some(dec) })
    }

    fn theta(&self, draw: &OuterDraw, q: u32, n_inner: usize, key: &StreamKey, gate: f64) -> Result<ThetaEstimate> {
        let dec = draw.decomposition.as_ref().ok_or_else(|| Error::InvalidArgument("outer draw carries no decomposition".into()))?;
        // with no outer coordinates every draw shares the same past
        if self.outer_coords() == 0 {
            if let Some(th) = self.frozen.get() {
                return Ok(*th);
            }
            let th = conditional_theta_gated(self.model, dec, q, n_inner, key, Some(gate))?;
            return Ok(*self.frozen.get_or_init(|| th));
        }
        conditional_theta_gated(self.model, dec, q, n_inner, key, Some(gate))
    }
}

#[derive(Debug, Clone)]
pub struct ThposOptions {
    pub r: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub workers: usize,
    pub seed: u64,
    /// `theta_hat + se_factor * se <= a(r)` is required for membership.
    pub se_factor: f64,
    /// Minimum number of samples in `Gamma` to call the bound certified.
    pub min_hits: u64,
    /// In-event samples with `|F_past| < check_radius` are checked against
    /// `det_floor` and `norm_ceiling`, and the violations counted.
    pub check_radius: f64,
    pub det_floor: f64,
    pub norm_ceiling: f64,
}

impl ThposOptions {
    pub fn new(r: f64, n_outer: usize, n_inner: usize) -> Self {
        ThposOptions {
            r,
            n_outer,
            n_inner,
            workers: 1,
            seed: 0,
            se_factor: 2.0,
            min_hits: 20,
            check_radius: f64::INFINITY,
            det_floor: 0.0,
            norm_ceiling: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ThetaSummary {
    pub evaluated: u64,
    pub rejected: u64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl ThetaSummary {
    fn push(&mut self, v: f64) {
        if self.evaluated == 0 {
            self.min = v;
            self.max = v;
        }
        self.evaluated += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.mean += (v - self.mean) / self.evaluated as f64;
    }

    fn merge(&mut self, o: &ThetaSummary) {
        if o.evaluated == 0 {
            self.rejected += o.rejected;
            return;
        }
        if self.evaluated == 0 {
            let rejected = self.rejected + o.rejected;
            *self = *o;
            self.rejected = rejected;
            return;
        }
        let n = (self.evaluated + o.evaluated) as f64;
        self.mean = (self.mean * self.evaluated as f64 + o.mean * o.evaluated as f64) / n;
        self.evaluated += o.evaluated;
        self.rejected += o.rejected;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }
}

/// Outer-loop statistics of the positivity estimator.
#[derive(Debug, Clone, Default)]
pub struct GammaStats {
    pub weight: Moments,
    pub event_hits: u64,
    pub gamma_hits: u64,
    pub theta: ThetaSummary,
    pub checked: u64,
    pub det_violations: u64,
    pub norm_violations: u64,
    pub event_det_min: f64,
    pub event_det_max: f64,
}

impl GammaStats {
    fn merge(&mut self, o: &GammaStats) {
        self.weight.merge(&o.weight);
        if o.event_hits > 0 {
            if self.event_hits == 0 {
                self.event_det_min = o.event_det_min;
                self.event_det_max = o.event_det_max;
            } else {
                self.event_det_min = self.event_det_min.min(o.event_det_min);
                self.event_det_max = self.event_det_max.max(o.event_det_max);
            }
        }
        self.event_hits += o.event_hits;
        self.gamma_hits += o.gamma_hits;
        self.theta.merge(&o.theta);
        self.checked += o.checked;
        self.det_violations += o.det_violations;
        self.norm_violations += o.norm_violations;
    }
}

/// Samples `(det C_delta)^{-1/2} 1_{event and Gamma_{delta,r}(y)}` over the
/// outer draws of `source`.
pub fn gamma_statistics(source: &dyn DecompositionSource, y: &[f64], opts: &ThposOptions, k: &ConstantsProfile) -> Result<GammaStats> {
    let d = source.dim();
    k.check_dim(d)?;
    if y.len() != d {
        return Err(Error::DimensionMismatch { what: "target point", expected: d, got: y.len() });
    }
    if !(opts.r > 0.0) {
        return Err(Error::InvalidArgument(format!("r must be positive, got {}", opts.r)));
    }
    if opts.n_outer < 2 {
        return Err(Error::NotEnoughSamples(format!("N_outer = {}, need at least 2", opts.n_outer)));
    }
    let a_r = a_of_r(opts.r, d, k);
    let blocks = run_blocks(opts.n_outer, BLOCK, opts.workers, |range| {
        let mut st = GammaStats::default();
        for i in range {
            let draw = source.outer(i as u64)?;
            if !draw.in_event {
                st.weight.push(0.0);
                continue;
            }
            let det = det_checked(&draw.c_delta, "C_delta").unwrap_or(0.0);
            if st.event_hits == 0 {
                st.event_det_min = det;
                st.event_det_max = det;
            }
            st.event_hits += 1;
            st.event_det_min = st.event_det_min.min(det);
            st.event_det_max = st.event_det_max.max(det);
            let v: Vec<f64> = draw.f_past.iter().zip(y).map(|(a, b)| a - b).collect();
            let dist = if det > 0.0 { delta_norm(&draw.c_delta, &v) } else { None };
            if draw.f_past.iter().map(|a| a * a).sum::<f64>().sqrt() < opts.check_radius {
                st.checked += 1;
                if det < opts.det_floor {
                    st.det_violations += 1;
                }
                if dist.is_none_or(|dist| dist > opts.norm_ceiling) {
                    st.norm_violations += 1;
                }
            }
            if !dist.is_some_and(|dist| dist <= opts.r * (1.0 + 1e-12)) {
                st.weight.push(0.0);
                continue;
            }
            let key = StreamKey::new(opts.seed, &format!("theta/{i}"));
            let th = source.theta(&draw, k.q_d, opts.n_inner, &key, a_r)?;
            if th.rejected_early {
                st.theta.rejected += 1;
                st.weight.push(0.0);
                continue;
            }
            st.theta.push(th.value);
            let upper = th.value + opts.se_factor * th.std_error;
            if gamma_indicator(&draw.f_past, &draw.c_delta, upper, y, opts.r, k) {
                st.gamma_hits += 1;
                st.weight.push(1.0 / det.sqrt());
            } else {
                st.weight.push(0.0);
            }
        }
        Ok(st)
    })?;
    let mut total = GammaStats::default();
    for b in &blocks {
        total.merge(b);
    }
    Ok(total)
}

/// One row of a `delta` sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub r: f64,
    pub a_r: f64,
    pub event_probability: f64,
    pub gamma_hits: u64,
    pub theta_max: f64,
    pub lower_bound: f64,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub pipeline: String,
    pub y: Vec<f64>,
    pub delta: Option<f64>,
    pub r: f64,
    pub a_r: f64,
    pub q: u32,
    pub n_outer: usize,
    pub n_inner: usize,
    pub event_hits: u64,
    pub gamma_hits: u64,
    /// Estimate of `E((det C_delta)^{-1/2} 1_Gamma)`.
    pub gamma_mass: f64,
    pub gamma_mass_std_error: f64,
    pub theta: ThetaSummary,
    pub lower_bound: f64,
    pub lower_bound_std_error: f64,
    pub certified: bool,
    pub reference_density: Option<EstimatorResult>,
    pub verdict: Option<bool>,
    pub constants: ConstantsProfile,
    pub intermediates: BTreeMap<String, f64>,
    pub sweep: Vec<SweepRow>,
    pub flags: Vec<String>,
}

impl LowerBoundReport {
    fn from_stats(pipeline: &str, y: &[f64], delta: Option<f64>, stats: &GammaStats, opts: &ThposOptions, k: &ConstantsProfile) -> Self {
        let d = y.len();
        let pre = thpos_prefactor(opts.r, d);
        let certified = stats.gamma_hits >= opts.min_hits;
        let mut flags = Vec::new();
        if k.provenance == Provenance::Literal {
            flags.push("constants are literal defaults, not calibrated".to_string());
        }
        if stats.gamma_hits == 0 {
            flags.push("no sample fell in Gamma: positivity not certified at this r and delta".to_string());
        } else if !certified {
            flags.push(format!("only {} samples fell in Gamma, fewer than {}", stats.gamma_hits, opts.min_hits));
        }
        LowerBoundReport {
            pipeline: pipeline.to_string(),
            y: y.to_vec(),
            delta,
            r: opts.r,
            a_r: a_of_r(opts.r, d, k),
            q: k.q_d,
            n_outer: opts.n_outer,
            n_inner: opts.n_inner,
            event_hits: stats.event_hits,
            gamma_hits: stats.gamma_hits,
            gamma_mass: stats.weight.mean,
            gamma_mass_std_error: stats.weight.std_error(),
            theta: stats.theta,
            lower_bound: if stats.gamma_hits == 0 { 0.0 } else { pre * stats.weight.mean },
            lower_bound_std_error: pre * stats.weight.std_error(),
            certified,
            reference_density: None,
            verdict: None,
            constants: k.clone(),
            intermediates: BTreeMap::new(),
            sweep: Vec::new(),
            flags,
        }
    }

    /// Records an independent density estimate and the verdict
    /// `lower_bound <= reference + 3 se`.
    pub fn attach_reference(&mut self, reference: EstimatorResult) {
        self.verdict = reference.std_error.is_finite().then(|| self.lower_bound <= reference.value + 3.0 * reference.std_error);
        self.reference_density = Some(reference);
    }

    fn row(&self) -> SweepRow {
        SweepRow {
            delta: self.delta.unwrap_or(f64::NAN),
            r: self.r,
            a_r: self.a_r,
            event_probability: self.event_hits as f64 / self.n_outer as f64,
            gamma_hits: self.gamma_hits,
            theta_max: self.theta.max,
            lower_bound: self.lower_bound,
            certified: self.certified,
        }
    }
}

/// `p_F(y) >= (2 e^{r^2} (2 pi)^{d/2})^{-1} E((det C_delta)^{-1/2} 1_Gamma)`
/// with the expectation estimated over `opts.n_outer` outer samples.
pub fn thpos_lower_bound(source: &dyn DecompositionSource, y: &[f64], opts: &ThposOptions, k: &ConstantsProfile) -> Result<LowerBoundReport> {
    let stats = gamma_statistics(source, y, opts, k)?;
    Ok(LowerBoundReport::from_stats("thpos", y, source.delta(), &stats, opts, k))
}

/// Sample sizes, parallelism and seed shared by the pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSettings {
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_reference: usize,
    pub workers: usize,
    pub seed: u64,
    pub min_hits: u64,
}

impl Default for MonteCarloSettings {
    fn default() -> Self {
        MonteCarloSettings { n_outer: 10_000, n_inner: 100, n_reference: 100_000, workers: 1, seed: 0, min_hits: 20 }
    }
}

/// Riesz estimate of `p_{X_T}(y)` from `mc.n_reference` paths on the `"reference"` stream.
pub fn reference_at(model: &ModelSpec, chart: &GaussianChart, y: &[f64], mc: &MonteCarloSettings) -> Result<EstimatorResult> {
    let opts = EstimatorOptions { workers: mc.workers, ..EstimatorOptions::default() };
    let key = StreamKey::new(mc.seed, "reference");
    Ok(terminal_density_grid(model, chart, &[y.to_vec()], mc.n_reference, &key, &opts)?.remove(0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Extreme eigenvalues of `sigma sigma^T` over a grid of `per_axis` points
/// per axis of the ball of radius `radius` around `centre`.
fn ball_eigen_range(model: &ModelSpec, centre: &[f64], radius: f64, per_axis: usize) -> (f64, f64) {
    let dim = centre.len();
    let per = per_axis.max(2);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut z = vec![0.0; dim];
    for idx in 0..per.pow(dim as u32) {
        let mut r = idx;
        let mut off2 = 0.0;
        for a in 0..dim {
            let o = -radius + 2.0 * radius * (r % per) as f64 / (per - 1) as f64;
            r /= per;
            z[a] = centre[a] + o;
            off2 += o * o;
        }
        if off2 > radius * radius {
            continue;
        }
        let s = model.sigma_sigma_t(&z);
        lo = lo.min(min_eigenvalue(&s));
        hi = hi.max(max_eigenvalue(&s));
    }
    (lo, hi)
}

fn aligned(chart: &GaussianChart, delta: f64) -> bool {
    let k = delta / chart.horizon() * chart.steps() as f64;
    delta > 0.0 && delta <= chart.horizon() && (k - k.round()).abs() < 1e-9 && k.round() >= 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoPositivityConfig {
    pub horizon: f64,
    pub steps: usize,
    pub deltas: Vec<f64>,
    /// Radius of the neighbourhood of `(x, y_T(phi))` on which
    /// `sigma sigma^T` is bounded above and below.
    pub eta: f64,
    /// Lower floor for `C_phi`.
    pub c_phi_floor: f64,
    pub attain_tol: f64,
    pub mc: MonteCarloSettings,
}

/// Positivity of `p_{X_T}(x)` when `sigma sigma^T(x, y_T(phi)) > 0` for some
/// attaining control. The outer samples are restricted to
/// `|Z_{T-delta} - z_{T-delta}(phi)| < C_phi sqrt(delta)` and the bound is
/// the positivity estimator with `r = 2 C_phi / sqrt(lambda_*)`.
pub fn ito_positivity_pipeline(model: &ModelSpec, x: &[f64], cfg: &ItoPositivityConfig, k: &ConstantsProfile) -> Result<LowerBoundReport> {
    let d = model.d;
    k.check_dim(d)?;
    let att = match check_attainable(model, x, cfg.horizon, cfg.steps, cfg.attain_tol, None) {
        Err(Error::SingularControl { t, min_eig }) => {
            return Err(Error::Refused(format!("no attaining control: sigma sigma^T singular at t = {t} (eigenvalue {min_eig:.3e})")))
        }
        other => other?,
    };
    if !att.attained {
        return Err(Error::Refused(format!("target not attained: endpoint error {:.3e}", att.endpoint_error)));
    }
    let skel = &att.skeleton;
    let mut z_end = skel.terminal().to_vec();
    z_end[..d].copy_from_slice(x);
    let end_lambda = min_eigenvalue(&model.sigma_sigma_t(&z_end));
    if !(end_lambda > 1e-12) {
        return Err(Error::Refused(format!("sigma sigma^T is singular at (x, y_T(phi)): smallest eigenvalue {end_lambda:.3e}")));
    }
    let (lam_lo, lam_hi) = ball_eigen_range(model, &z_end, cfg.eta, 9);
    if !(lam_lo > 0.0) {
        return Err(Error::Refused(format!("sigma sigma^T degenerates within eta = {} of the endpoint", cfg.eta)));
    }
    let chart = GaussianChart::uniform(cfg.horizon, cfg.steps, model.m)?;
    for delta in &cfg.deltas {
        if !aligned(&chart, *delta) {
            return Err(Error::GridMisaligned { delta: *delta });
        }
    }
    let t = cfg.horizon;
    let ratio = |delta: f64| norm(&skel.value_at(t).iter().zip(skel.value_at(t - delta)).map(|(a, b)| a - b).collect::<Vec<_>>()) / delta.sqrt();
    let c_phi = cfg.deltas.iter().map(|dl| ratio(*dl)).fold(cfg.c_phi_floor, f64::max);
    let r = 2.0 * c_phi / lam_lo.sqrt();
    let mut best: Option<LowerBoundReport> = None;
    let mut rows = Vec::new();
    for (idx, delta) in cfg.deltas.iter().enumerate() {
        if 2.0 * c_phi * delta.sqrt() >= cfg.eta {
            rows.push(SweepRow {
                delta: *delta,
                r,
                a_r: a_of_r(r, d, k),
                event_probability: f64::NAN,
                gamma_hits: 0,
                theta_max: f64::NAN,
                lower_bound: 0.0,
                certified: false,
            });
            continue;
        }
        let source = ModelSource::new(
            model,
            &chart,
            *delta,
            DecompositionKind::Ito,
            OuterEvent::StateBall { centre: skel.value_at(t - delta), radius: c_phi * delta.sqrt() },
            StreamKey::new(cfg.mc.seed, &format!("ito-pos/outer/{idx}")),
        );
        let mut opts = ThposOptions::new(r, cfg.mc.n_outer, cfg.mc.n_inner);
        opts.workers = cfg.mc.workers;
        opts.seed = cfg.mc.seed ^ (idx as u64 + 1);
        opts.min_hits = cfg.mc.min_hits;
        let stats = gamma_statistics(&source, x, &opts, k)?;
        let mut rep = LowerBoundReport::from_stats("ito-pos", x, Some(*delta), &stats, &opts, k);
        let event_p = stats.event_hits as f64 / opts.n_outer as f64;
        let gamma_p = stats.gamma_hits as f64 / opts.n_outer as f64;
        let displayed = thpos_prefactor(r, d) * (lam_hi * delta).powf(-(d as f64) / 2.0) * gamma_p;
        rep.intermediates.insert("event_probability".into(), event_p);
        rep.intermediates.insert("displayed_bound".into(), displayed);
        rows.push(rep.row());
        if rep.certified && best.as_ref().is_none_or(|b| rep.lower_bound > b.lower_bound) {
            best = Some(rep);
        }
    }
    let Some(mut rep) = best else {
        return Err(Error::Refused(format!(
            "no delta in the sweep certified positivity (Gamma hits {:?})",
            rows.iter().map(|r| r.gamma_hits).collect::<Vec<_>>()
        )));
    };
    rep.sweep = rows;
    for (key, v) in [
        ("c_phi", c_phi),
        ("lambda_lower", lam_lo),
        ("lambda_upper", lam_hi),
        ("endpoint_lambda", end_lambda),
        ("control_energy", att.control.energy()),
        ("eta", cfg.eta),
    ] {
        rep.intermediates.insert(key.into(), v);
    }
    rep.attach_reference(reference_at(model, &chart, x, &cfg.mc)?);
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoLowerBoundConfig {
    pub horizon: f64,
    pub steps: usize,
    pub eta: f64,
    pub lambda_star: f64,
    pub delta: f64,
    pub mu: f64,
    pub h: f64,
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
    pub y_grid: usize,
    /// Asserts `sigma sigma^T >= lambda_star` outside the sampled `y` box.
    pub waiver: bool,
    pub attain_tol: f64,
    pub monitoring: ExitMonitoring,
    pub mc: MonteCarloSettings,
}

/// `p_{X_T}(x) >= Upsilon P(tau_eta > T)` with
/// `Upsilon = (2 (2 pi lambda^* delta)^{d/2} e^{r^2})^{-1}` and
/// `r = 2 eta / sqrt(lambda_* delta)`, after checking every precondition.
pub fn ito_lowerbound_pipeline(
    model: &ModelSpec,
    x: &[f64],
    phi: &ControlPath,
    cfg: &ItoLowerBoundConfig,
    k: &ConstantsProfile,
) -> Result<LowerBoundReport> {
    let d = model.d;
    k.check_dim(d)?;
    if x.len() != d {
        return Err(Error::DimensionMismatch { what: "target point", expected: d, got: x.len() });
    }
    if !(cfg.eta > 0.0 && cfg.lambda_star > 0.0) {
        return Err(Error::InvalidArgument("eta and lambda_star must be positive".into()));
    }
    let chart = GaussianChart::uniform(cfg.horizon, cfg.steps, model.m)?;
    if !aligned(&chart, cfg.delta) {
        return Err(Error::GridMisaligned { delta: cfg.delta });
    }
    let skel = integrate_skeleton(model, phi, &model.x0, chart.grid())?;
    let gap = norm(&skel.terminal()[..d].iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>());
    if gap > cfg.attain_tol {
        return Err(Error::Refused(format!("attainability certificate failed: |x_T(phi) - x| = {gap:.3e}")));
    }
    let cert = uniform_ellipticity(model, &skel, &cfg.y_lo, &cfg.y_hi, cfg.y_grid, cfg.waiver)?;
    if cert.lambda_min < cfg.lambda_star {
        return Err(Error::Refused(format!(
            "ellipticity certificate failed: sampled minimum {:.3e} < lambda_star {:.3e} at t = {}",
            cert.lambda_min, cfg.lambda_star, cert.worst_time
        )));
    }
    let t = cfg.horizon;
    let speed = skel.speed_integral(t - cfg.delta, t);
    if speed >= cfg.eta {
        return Err(Error::Refused(format!("speed certificate failed: int_(T-delta)^T |x'| = {speed:.3e} >= eta = {}", cfg.eta)));
    }
    if !check_lmuh(&skel.times, &skel.speeds(), cfg.mu, cfg.h) {
        return Err(Error::Refused(format!("L(mu, h) certificate failed for mu = {}, h = {}", cfg.mu, cfg.h)));
    }
    let lam_hi = tube_eigen_max(model, &skel, cfg)?;
    let r = 2.0 * cfg.eta / (cfg.lambda_star * cfg.delta).sqrt();
    let a_r = a_of_r(r, d, k);
    let theta = skeleton_theta(model, &skel, cfg.delta, k.q_d, cfg.mc.n_inner.max(2), cfg.mc.seed)?;
    if theta.value + 2.0 * theta.std_error > a_r {
        return Err(Error::Refused(format!(
            "theta certificate failed: theta_hat = {:.3e} (se {:.1e}) exceeds a(r) = {:.3e}",
            theta.value, theta.std_error, a_r
        )));
    }
    let tube = tube_probability(
        model,
        &skel,
        cfg.eta,
        cfg.mc.n_outer,
        &chart,
        &StreamKey::new(cfg.mc.seed, "ito-lb/tube"),
        cfg.monitoring,
        cfg.mc.workers,
    )?;
    let upsilon = 1.0 / (2.0 * (2.0 * PI * lam_hi * cfg.delta).powf(d as f64 / 2.0) * (r * r).exp());
    let displayed = 1.0 / (2.0 * (2.0 * PI * cfg.lambda_star * cfg.delta).powf(d as f64 / 2.0) * (4.0 * cfg.eta * cfg.eta).exp());
    let hits = tube.probability * cfg.mc.n_outer as f64;
    let mut flags = Vec::new();
    if k.provenance == Provenance::Literal {
        flags.push("constants are literal defaults, not calibrated".to_string());
    }
    let certified = tube.probability > 0.0 && hits >= cfg.mc.min_hits as f64;
    if !certified {
        flags.push("tube probability estimate too small to certify positivity".to_string());
    }
    let mut rep = LowerBoundReport {
        pipeline: "ito-lb".into(),
        y: x.to_vec(),
        delta: Some(cfg.delta),
        r,
        a_r,
        q: k.q_d,
        n_outer: cfg.mc.n_outer,
        n_inner: cfg.mc.n_inner,
        event_hits: hits.round() as u64,
        gamma_hits: hits.round() as u64,
        gamma_mass: tube.probability,
        gamma_mass_std_error: tube.std_error,
        theta: ThetaSummary { evaluated: 1, rejected: 0, min: theta.value, mean: theta.value, max: theta.value },
        lower_bound: upsilon * tube.probability,
        lower_bound_std_error: upsilon * tube.std_error,
        certified,
        reference_density: None,
        verdict: None,
        constants: k.clone(),
        intermediates: BTreeMap::new(),
        sweep: Vec::new(),
        flags,
    };
    for (key, v) in [
        ("tube_probability", tube.probability),
        ("tube_std_error", tube.std_error),
        ("upsilon", upsilon),
        ("displayed_upsilon", displayed),
        ("displayed_bound", displayed * tube.probability),
        ("lambda_star", cfg.lambda_star),
        ("lambda_sampled_min", cert.lambda_min),
        ("lambda_upper", lam_hi),
        ("speed_integral", speed),
        ("eta", cfg.eta),
        ("theta_std_error", theta.std_error),
    ] {
        rep.intermediates.insert(key.into(), v);
    }
    rep.attach_reference(reference_at(model, &chart, x, &cfg.mc)?);
    Ok(rep)
}

/// Largest eigenvalue of `sigma sigma^T` over the `eta`-tube around the
/// skeleton in `x` and the sampled `y` box.
fn tube_eigen_max(model: &ModelSpec, skel: &SkeletonPath, cfg: &ItoLowerBoundConfig) -> Result<f64> {
    let (d, n) = (model.d, model.n);
    let per_x = 5usize;
    let per_y = if n == 0 { 1 } else { cfg.y_grid.max(2) };
    let mut hi = 0.0f64;
    let mut z = vec![0.0; d + n];
    for kk in 0..skel.times.len() {
        let c = &skel.state(kk)[..d];
        for ix in 0..per_x.pow(d as u32) {
            let mut r = ix;
            let mut off2 = 0.0;
            for a in 0..d {
                let o = -cfg.eta + 2.0 * cfg.eta * (r % per_x) as f64 / (per_x - 1) as f64;
                r /= per_x;
                z[a] = c[a] + o;
                off2 += o * o;
            }
            if off2 > cfg.eta * cfg.eta {
                continue;
            }
            for iy in 0..per_y.pow(n as u32) {
                let mut r = iy;
                for a in 0..n {
                    z[d + a] = cfg.y_lo[a] + (cfg.y_hi[a] - cfg.y_lo[a]) * (r % per_y) as f64 / (per_y - 1) as f64;
                    r /= per_y;
                }
                hi = hi.max(max_eigenvalue(&model.sigma_sigma_t(&z)));
            }
        }
    }
    if !(hi > 0.0 && hi.is_finite()) {
        return Err(Error::Refused("sigma sigma^T vanishes on the tube".into()));
    }
    Ok(hi)
}

/// `theta_{delta,q}` conditional on the past ending at `z_{T-delta}(phi)`.
fn skeleton_theta(model: &ModelSpec, skel: &SkeletonPath, delta: f64, q: u32, n_inner: usize, seed: u64) -> Result<ThetaEstimate> {
    let t = *skel.times.last().unwrap();
    let start = skel.value_at(t - delta);
    let local = model.clone().with_x0(start)?;
    let steps = skel.times.iter().filter(|s| **s >= t - delta - 1e-12).count() - 1;
    let chart = GaussianChart::uniform(delta, steps.max(1), model.m)?;
    let dec = decompose_ito(&local, &chart, &vec![0.0; chart.n()], delta)?;
    conditional_theta_gated(&local, &dec, q, n_inner, &StreamKey::new(seed, "ito-lb/theta"), None)
}

/// How `r` is chosen in the degenerate pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusRule {
    /// `r = c_2 rho_delta`.
    Lemma,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HormanderConfig {
    pub horizon: f64,
    pub steps: usize,
    /// Candidate lags, tried in order until one certifies.
    pub deltas: Vec<f64>,
    pub c_star: f64,
    pub radius: RadiusRule,
    /// Half-width of the box around the skeleton scanned for coefficient bounds.
    pub box_radius: f64,
    pub attain_tol: f64,
    pub mc: MonteCarloSettings,
}

/// Coefficient bounds entering the constants of the degenerate case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HormanderConstants {
    pub sigma_lo: f64,
    pub db_lo: f64,
    /// Bound on the first derivatives of the drift.
    pub drift_lip: f64,
    /// `c_1 = (sigma_lo^2 db_lo)^2 / 2`.
    pub c1: f64,
    /// `c_2 = max(8 B^2, 21) / (sigma_lo^2 db_lo^2)`.
    pub c2: f64,
}

/// Scans `|sigma_1|`, `|d_1 b_2|` and `|grad b|` over the box spanned by the
/// skeleton widened by `radius`, on a 41 x 41 grid.
pub fn hormander_constants(model: &ModelSpec, skel: &SkeletonPath, radius: f64) -> Result<HormanderConstants> {
    check_h1_shape(model)?;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for kk in 0..skel.times.len() {
        for a in 0..2 {
            lo[a] = lo[a].min(skel.state(kk)[a] - radius);
            hi[a] = hi[a].max(skel.state(kk)[a] + radius);
        }
    }
    let per = 41;
    let (mut s_lo, mut db_lo, mut lip) = (f64::INFINITY, f64::INFINITY, 0.0f64);
    let (mut s, mut db) = ([0.0; 2], [0.0; 4]);
    for i in 0..per {
        for j in 0..per {
            let z = [
                lo[0] + (hi[0] - lo[0]) * i as f64 / (per - 1) as f64,
                lo[1] + (hi[1] - lo[1]) * j as f64 / (per - 1) as f64,
            ];
            model.sigma_field(0).value(&z, &mut s);
            model.drift_field().gradient(&z, &mut db);
            s_lo = s_lo.min(s[0].abs());
            db_lo = db_lo.min(db[2].abs());
            lip = lip.max(db.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
    }
    let base = s_lo * s_lo * db_lo;
    let c2 = if base > 0.0 { (8.0 * lip * lip).max(21.0) / (s_lo * s_lo * db_lo * db_lo) } else { f64::INFINITY };
    Ok(HormanderConstants { sigma_lo: s_lo, db_lo, drift_lip: lip, c1: 0.5 * base * base, c2 })
}

/// Positivity of `p_{X_T}(y)` for the degenerate two-dimensional model under
/// the weak Hörmander condition at `y`, centred on the skeleton of `phi`.
pub fn hormander_pipeline(
    model: &ModelSpec,
    y: &[f64],
    phi: &ControlPath,
    cfg: &HormanderConfig,
    k: &ConstantsProfile,
) -> Result<LowerBoundReport> {
    check_h1_shape(model)?;
    k.check_dim(2)?;
    let h2 = weak_hormander_check(model, y, cfg.c_star)?;
    if !h2.holds {
        return Err(Error::Refused(format!(
            "weak Hörmander condition fails at y: margins {:.3e} (sigma_1), {:.3e} (d_1 b_2)",
            h2.sigma_margin, h2.bracket_margin
        )));
    }
    let chart = GaussianChart::uniform(cfg.horizon, cfg.steps, 1)?;
    let skel = integrate_skeleton(model, phi, &model.x0, chart.grid())?;
    let end = skel.terminal().to_vec();
    let gap = norm(&[end[0] - y[0], end[1] - y[1]]);
    if gap > cfg.attain_tol {
        return Err(Error::Refused(format!("x_T(phi) misses y by {gap:.3e}")));
    }
    let hc = hormander_constants(model, &skel, cfg.box_radius)?;
    let y_f = [y[0] - end[0], y[1] - end[1]];
    let t = cfg.horizon;
    let mut rows = Vec::new();
    for (idx, delta) in cfg.deltas.iter().enumerate() {
        if !aligned(&chart, *delta) {
            return Err(Error::GridMisaligned { delta: *delta });
        }
        let rho = rho_delta(phi, *delta);
        let r = match cfg.radius {
            RadiusRule::Lemma => hc.c2 * rho,
            RadiusRule::Fixed(r) => r,
        };
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Refused(format!("no usable radius: c_2 = {}, rho_delta = {rho}", hc.c2)));
        }
        let source = ModelSource::new(
            model,
            &chart,
            *delta,
            DecompositionKind::Hormander { skel_past: skel.value_at(t - delta), skel_end: end.clone() },
            OuterEvent::All,
            StreamKey::new(cfg.mc.seed, &format!("hormander/outer/{idx}")),
        );
        let mut opts = ThposOptions::new(r, cfg.mc.n_outer, cfg.mc.n_inner);
        opts.workers = cfg.mc.workers;
        opts.seed = cfg.mc.seed ^ (idx as u64 + 1);
        opts.min_hits = cfg.mc.min_hits;
        opts.check_radius = delta.powf(1.5) * rho;
        opts.det_floor = hc.c1 * delta.powi(4) / 12.0;
        opts.norm_ceiling = hc.c2 * rho;
        let stats = gamma_statistics(&source, &y_f, &opts, k)?;
        let mut rep = LowerBoundReport::from_stats("hormander", y, Some(*delta), &stats, &opts, k);
        let event_p = stats.checked as f64 / opts.n_outer as f64;
        for (key, v) in [
            ("rho_delta", rho),
            ("event_probability", event_p),
            ("lemma_i_violations", stats.det_violations as f64),
            ("lemma_ii_violations", stats.norm_violations as f64),
            ("det_c_min", stats.event_det_min),
            ("det_c_max", stats.event_det_max),
            ("det_c_continuous", hormander_det(model, &skel, *delta)),
            ("event_bound", thpos_prefactor(r, 2) * event_p / stats.event_det_max.sqrt()),
        ] {
            rep.intermediates.insert(key.into(), v);
        }
        rows.push(rep.row());
        if rep.certified {
            rep.sweep = rows;
            for (key, v) in [("c1", hc.c1), ("c2", hc.c2), ("sigma_lo", hc.sigma_lo), ("db_lo", hc.db_lo), ("drift_lip", hc.drift_lip)] {
                rep.intermediates.insert(key.into(), v);
            }
            rep.intermediates.insert("sigma_margin".into(), h2.sigma_margin);
            rep.intermediates.insert("bracket_margin".into(), h2.bracket_margin);
            rep.attach_reference(reference_at(model, &chart, y, &cfg.mc)?);
            return Ok(rep);
        }
    }
    Err(Error::Refused(format!(
        "no delta in the sweep met the theta threshold: (delta, a(r), max theta_hat, Gamma hits) = {:?}",
        rows.iter().map(|r| (r.delta, r.a_r, r.theta_max, r.gamma_hits)).collect::<Vec<_>>()
    )))
}

/// `det` of the continuous-time covariance at the skeleton state `z_{T-delta}(phi)`.
fn hormander_det(model: &ModelSpec, skel: &SkeletonPath, delta: f64) -> f64 {
    let t = *skel.times.last().unwrap();
    let z = skel.value_at(t - delta);
    let (mut s, mut db) = ([0.0; 2], [0.0; 4]);
    model.sigma_field(0).value(&z, &mut s);
    model.drift_field().gradient(&z, &mut db);
    crate::sde::hormander_covariance(s[0], db[2], delta).determinant()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::cst;
    use crate::models::{build, default_model};
    use proptest::prelude::*;

    fn lit(d: usize) -> ConstantsProfile {
        ConstantsProfile::literal(d)
    }

    #[test]
    fn epsilon_examples() {
        let i = DMatrix::identity(2, 2);
        assert_eq!(epsilon_bound(&i, 0.0, &lit(2)).unwrap(), 0.0);
        assert_eq!(epsilon_bound(&i, 1.0, &lit(2)).unwrap(), 2.0);
        assert!(epsilon_bound(&DMatrix::zeros(2, 2), 1.0, &lit(2)).is_err());
    }

    proptest! {
        #[test]
        fn epsilon_monotone(r in 0.0..10.0f64, dr in 1e-6..1.0f64, c in 0.1..10.0f64, ell in 0.1..3.0f64, s in 0.1..4.0f64) {
            let k = ConstantsProfile { c_d: c, ell_d: ell, ..lit(1) };
            let m = DMatrix::from_element(1, 1, s);
            prop_assert!(epsilon_bound(&m, r + dr, &k).unwrap() > epsilon_bound(&m, r, &k).unwrap());
        }

        #[test]
        fn a_of_r_decreasing(r in 0.0..5.0f64, dr in 1e-3..1.0f64, d in 1usize..4) {
            let (a, b) = (a_of_r(r, d, &lit(d)), a_of_r(r + dr, d, &lit(d)));
            prop_assert!(b < a && a <= 1.0 && b > 0.0);
        }

        #[test]
        fn gamma_monotone_in_r(fx in -3.0..3.0f64, fy in -3.0..3.0f64, theta in 0.0..0.01f64, r in 0.1..3.0f64, dr in 0.0..2.0f64) {
            let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
            let k = ConstantsProfile { c_d: 0.01, ..lit(2) };
            if gamma_indicator(&[fx, fy], &c, theta, &[0.0, 0.0], r + dr, &k) {
                // a(r) shrinks with r, so only the distance condition is monotone
                prop_assert!(delta_norm(&c, &[fx, fy]).unwrap() <= (r + dr) * (1.0 + 1e-12));
            }
            if gamma_indicator(&[fx, fy], &c, 0.0, &[0.0, 0.0], r, &k) {
                prop_assert!(gamma_indicator(&[fx, fy], &c, 0.0, &[0.0, 0.0], r + dr, &k));
            }
        }
    }

    #[test]
    fn a_of_r_example() {
        assert!((a_of_r(0.0, 1, &lit(1)) - 1.0 / (4.0 * (2.0 * PI).sqrt())).abs() < 1e-15);
        assert!((a_of_r(0.0, 1, &lit(1)) - 0.09974).abs() < 1e-5);
    }

    #[test]
    fn gamma_examples() {
        let i = DMatrix::identity(2, 2);
        assert!(gamma_indicator(&[0.5, 0.5], &i, 0.0, &[0.5, 0.5], 0.1, &lit(2)));
        assert!(!gamma_indicator(&[0.5, 0.5], &DMatrix::zeros(2, 2), 0.0, &[0.5, 0.5], 10.0, &lit(2)));
        assert!(gamma_indicator(&[1.5, 0.0], &i, 0.0, &[0.0, 0.0], 1.5, &lit(2)));
        assert!(!gamma_indicator(&[0.0, 0.0], &i, 1.0, &[0.0, 0.0], 1.5, &lit(2)));
    }

    #[test]
    fn sandwich_checker() {
        let g = GaussianSpec::standard(1);
        let pts: Vec<_> = (-3..=3).map(|k| {
            let y = vec![k as f64];
            let v = gaussian_density(&g, &y).unwrap();
            (y, v, 1e-3)
        }).collect();
        assert_eq!(density_sandwich(&g, 0.0, 1.0, &pts).unwrap().violations, 0);
        assert_eq!(density_sandwich(&g, -1.0, 1.0, &pts).unwrap().violations, pts.len());
    }

    #[test]
    fn quadratic_pushforward_integrates_to_one() {
        for eps in [1e-3, 1e-2, 1e-1] {
            let lo: f64 = -eps - 1.0 / (4.0 * eps);
            // substitute y = lo + u^2 to remove the inverse square-root singularity
            let rule = crate::quadrature::gauss_legendre(400, 0.0, (40.0 - lo).sqrt());
            let mass: f64 = rule.nodes.iter().zip(&rule.weights).map(|(u, w)| w * 2.0 * u * quadratic_pushforward_density(eps, lo + u * u)).sum();
            assert!((mass - 1.0).abs() < 1e-6, "eps {eps}: {mass}");
        }
    }

    #[test]
    fn quadratic_instance_norm() {
        let inst = quadratic_family_instance(0.01, 2);
        assert!((inst.r_norm - 10f64.sqrt() * 0.01).abs() < 1e-12);
        assert!(inst.gap > 0.0 && inst.gap < 0.05);
    }

    #[test]
    fn calibration_examples() {
        let pure: Vec<_> = (0..5).map(|_| CalibrationInstance { m_g: DMatrix::identity(1, 1), r_norm: 0.0, gap: 0.0 }).collect();
        assert!(matches!(calibrate_constants(1, &pure[..3], 2.0), Err(Error::Refused(_))));
        assert_eq!(calibrate_constants(1, &pure, 2.0).unwrap(), lit(1));
        let eps = [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1];
        let fam: Vec<_> = eps.iter().map(|e| quadratic_family_instance(*e, 2)).collect();
        let k = calibrate_constants(1, &fam, 2.0).unwrap();
        assert_eq!(k.provenance, Provenance::Calibrated);
        for inst in &fam {
            assert!(inst.gap <= epsilon_bound(&inst.m_g, inst.r_norm, &k).unwrap());
        }
        let fit = k.fit.clone().unwrap();
        let held = quadratic_family_instance(3e-2, 2);
        let raw = fit.c_fit * (1.0 + held.r_norm).powf(fit.ell_fit) * held.r_norm;
        assert!(raw / held.gap < 2.0 && held.gap / raw < 2.0, "{raw} vs {}", held.gap);
        for r in [0.0, 1.0, 2.5, 5.0] {
            let a = a_of_r(r, 1, &k);
            assert!(a > 0.0 && a <= 1.0);
        }
    }

    fn gaussian_source(c: f64, seed: u64) -> GaussianSource {
        let past = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]) * (c * c);
        let cov = DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.6]) * (c * c);
        GaussianSource::new(vec![0.2, -0.1], past, cov, StreamKey::new(seed, "gauss")).unwrap()
    }

    #[test]
    fn pure_gaussian_bound_is_below_density() {
        let src = gaussian_source(1.0, 1);
        let opts = ThposOptions::new(1.0, 20_000, 1);
        for i in 0..21 {
            let y = [0.2 + (i as f64 - 10.0) * 0.25, -0.1 + (i as f64 - 10.0) * 0.1];
            let rep = thpos_lower_bound(&src, &y, &opts, &lit(2)).unwrap();
            assert!(rep.lower_bound <= src.density(&y).unwrap() + 3.0 * rep.lower_bound_std_error);
        }
        let far = thpos_lower_bound(&src, &[30.0, 30.0], &opts, &lit(2)).unwrap();
        assert_eq!(far.lower_bound, 0.0);
        assert!(!far.certified);
    }

    #[test]
    fn pure_gaussian_bound_is_scale_covariant() {
        let y = [0.6, 0.3];
        let base = thpos_lower_bound(&gaussian_source(1.0, 2), &y, &ThposOptions::new(0.8, 5_000, 1), &lit(2)).unwrap();
        for c in [0.5, 2.0] {
            let src = gaussian_source(c, 2);
            let yc = [0.2 + c * (y[0] - 0.2), -0.1 + c * (y[1] + 0.1)];
            let rep = thpos_lower_bound(&src, &yc, &ThposOptions::new(0.8, 5_000, 1), &lit(2)).unwrap();
            assert_eq!(rep.gamma_hits, base.gamma_hits);
            assert!((rep.lower_bound * c * c - base.lower_bound).abs() < 1e-8 * base.lower_bound);
        }
    }

    fn mc(n_outer: usize) -> MonteCarloSettings {
        MonteCarloSettings { n_outer, n_inner: 20, n_reference: 50_000, workers: 1, seed: 3, min_hits: 20 }
    }

    #[test]
    fn ito_positivity_on_constant_model() {
        let m = ModelSpec::new("c", 1, 0, vec![vec![cst(1.0)]], vec![cst(0.1)], vec![0.0]).unwrap();
        let cfg = ItoPositivityConfig {
            horizon: 1.0,
            steps: 64,
            deltas: vec![0.25, 0.125, 0.0625, 0.03125, 0.015625],
            eta: 1.0,
            c_phi_floor: 0.5,
            attain_tol: 1e-8,
            mc: mc(4000),
        };
        let rep = ito_positivity_pipeline(&m, &[0.2], &cfg, &lit(1)).unwrap();
        assert!(rep.lower_bound > 0.0 && rep.certified);
        assert_eq!(rep.verdict, Some(true));
        let probs: Vec<f64> = rep.sweep.iter().filter(|r| r.event_probability.is_finite()).map(|r| r.event_probability).collect();
        assert!(probs.iter().all(|p| *p > 0.0));
        assert!(probs.first() >= probs.last());
        let dead = ModelSpec::new("v", 1, 0, vec![vec![crate::expr::var(0) - cst(0.2)]], vec![cst(0.2)], vec![0.0]).unwrap();
        let out = ito_positivity_pipeline(&dead, &[0.2], &cfg, &lit(1));
        assert!(matches!(out, Err(Error::Refused(_))), "{out:?}");
    }

    fn bm_lb(eta: f64) -> Result<LowerBoundReport> {
        let m = default_model("bm1d").unwrap();
        let cfg = ItoLowerBoundConfig {
            horizon: 1.0,
            steps: 64,
            eta,
            lambda_star: 1.0,
            delta: 0.25,
            mu: 1.0,
            h: 0.1,
            y_lo: vec![],
            y_hi: vec![],
            y_grid: 2,
            waiver: false,
            attain_tol: 1e-9,
            monitoring: ExitMonitoring::BrownianBridge,
            mc: mc(5000),
        };
        let phi = ControlPath::zero(GaussianChart::uniform(1.0, 64, 1).unwrap().grid().to_vec(), 1).unwrap();
        ito_lowerbound_pipeline(&m, &[0.0], &phi, &cfg, &lit(1))
    }

    #[test]
    fn ito_lowerbound_on_brownian_motion() {
        let rep = bm_lb(1.0).unwrap();
        let p = rep.intermediates["tube_probability"];
        assert!((p - 0.3708).abs() < 0.03, "{p}");
        assert!(rep.lower_bound > 0.0 && rep.lower_bound <= 1.0 / (2.0 * PI).sqrt());
        assert!(rep.intermediates["displayed_bound"] <= 1.0 / (2.0 * PI).sqrt());
        assert_eq!(rep.verdict, Some(true));
    }

    #[test]
    fn ito_lowerbound_refuses_when_speed_exceeds_eta() {
        let m = ModelSpec::new("drift", 1, 0, vec![vec![cst(1.0)]], vec![cst(4.0)], vec![0.0]).unwrap();
        let cfg = ItoLowerBoundConfig {
            horizon: 1.0,
            steps: 64,
            eta: 0.5,
            lambda_star: 1.0,
            delta: 0.25,
            mu: 1.0,
            h: 0.1,
            y_lo: vec![],
            y_hi: vec![],
            y_grid: 2,
            waiver: false,
            attain_tol: 1e-9,
            monitoring: ExitMonitoring::GridOnly,
            mc: mc(100),
        };
        let phi = ControlPath::zero(GaussianChart::uniform(1.0, 64, 1).unwrap().grid().to_vec(), 1).unwrap();
        match ito_lowerbound_pipeline(&m, &[4.0], &phi, &cfg, &lit(1)) {
            Err(Error::Refused(msg)) => assert!(msg.contains("speed")),
            other => panic!("{other:?}"),
        }
    }

    fn kolmogorov_cfg(radius: RadiusRule) -> HormanderConfig {
        HormanderConfig {
            horizon: 1.0,
            steps: 50,
            deltas: vec![1.0, 0.5],
            c_star: 0.5,
            radius,
            box_radius: 1.0,
            attain_tol: 1e-9,
            mc: MonteCarloSettings { n_outer: 200, n_inner: 4, n_reference: 50_000, workers: 1, seed: 1, min_hits: 20 },
        }
    }

    #[test]
    fn hormander_pipeline_on_kolmogorov() {
        let m = default_model("kolmogorov").unwrap();
        let phi = ControlPath::zero(GaussianChart::uniform(1.0, 50, 1).unwrap().grid().to_vec(), 1).unwrap();
        let oracle = 12f64.sqrt() / (2.0 * PI);
        let rep = hormander_pipeline(&m, &[0.0, 0.0], &phi, &kolmogorov_cfg(RadiusRule::Fixed(1.0)), &lit(2)).unwrap();
        assert!(rep.lower_bound > 0.0 && rep.lower_bound <= oracle, "{}", rep.lower_bound);
        assert_eq!(rep.verdict, Some(true));
        assert_eq!(rep.intermediates["lemma_i_violations"], 0.0);
        assert!((rep.intermediates["det_c_continuous"] - 1.0 / 12.0).abs() < 1e-12);
        assert_eq!(rep.intermediates["c2"], 21.0);
        // r = 21 rho puts a(r) near 1e-193, below the rounding noise in R
        let lemma = hormander_pipeline(&m, &[0.0, 0.0], &phi, &kolmogorov_cfg(RadiusRule::Lemma), &lit(2));
        assert!(matches!(lemma, Err(Error::Refused(_))));
        let mut p = std::collections::BTreeMap::new();
        p.insert("c".to_string(), 0.0);
        let flat = build("kolmogorov", &p).unwrap();
        assert!(matches!(hormander_pipeline(&flat, &[0.0, 0.0], &phi, &kolmogorov_cfg(RadiusRule::Fixed(1.0)), &lit(2)), Err(Error::Refused(_))));
    }
}
