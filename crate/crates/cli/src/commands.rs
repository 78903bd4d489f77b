//! Subcommand bodies. Each one fills an [`Artifacts`] set and leaves disk
//! writes to the caller.

use serde::Serialize;
use wiener_density::bounds::{
    calibrate_constants, epsilon_bound, hormander_pipeline, ito_lowerbound_pipeline, ito_positivity_pipeline, quadratic_family_instance,
    reference_at, thpos_lower_bound, DecompositionKind, HormanderConfig, ItoLowerBoundConfig, ItoPositivityConfig, LowerBoundReport,
    ModelSource, MonteCarloSettings, OuterEvent, ThposOptions,
};
use wiener_density::malliavin::GaussianChart;
use wiener_density::mc::StreamKey;
use wiener_density::riesz::{chart_draw, estimate_conditional, terminal_density_grid, EstimatorOptions, EstimatorResult};
use wiener_density::sde::{tangent_derivatives, ModelSpec};
use wiener_density::skeleton::{
    integrate_skeleton, synthesize_control, tube_probability, ControlPath, ExitMonitoring, LinePath, SkeletonPath,
};
use wiener_density::{models, Error};

use crate::config::{ConfigError, ExperimentConfig, PipelineKind};
use crate::output::{num, opt, Artifacts};

/// Why a run stopped.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Core(Error),
    /// A selftest check missed its tolerance.
    Check(String),
    Io(std::io::Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Core(e)
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core(e) => match e {
                Error::Refused(_) => 3,
                Error::InvalidArgument(_)
                | Error::DimensionMismatch { .. }
                | Error::ModelShape(_)
                | Error::GridMisaligned { .. }
                | Error::NotEnoughSamples(_)
                | Error::UnsupportedOrder(_) => 2,
                _ => 4,
            },
            RunError::Check(_) => 4,
            RunError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "invalid config: {e}"),
            RunError::Core(e) => write!(f, "{e}"),
            RunError::Check(s) => write!(f, "selftest failed: {s}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

type Run<T = ()> = Result<T, RunError>;

pub fn stage(msg: &str) {
    eprintln!("[wdens] {msg}");
}

fn chart(cfg: &ExperimentConfig, model: &ModelSpec) -> Run<GaussianChart> {
    Ok(GaussianChart::uniform(cfg.grid.horizon, cfg.grid.steps, model.m)?)
}

fn estimator(cfg: &ExperimentConfig) -> EstimatorOptions {
    EstimatorOptions { workers: cfg.estimator.workers, winsorize: cfg.estimator.winsorize, ..EstimatorOptions::default() }
}

fn points(cfg: &ExperimentConfig, model: &ModelSpec) -> Vec<Vec<f64>> {
    if cfg.points.is_empty() {
        vec![model.x0[..model.d].to_vec()]
    } else {
        cfg.points.clone()
    }
}

fn control(cfg: &ExperimentConfig, model: &ModelSpec, chart: &GaussianChart) -> Run<ControlPath> {
    let phi = cfg.control.phi.clone().unwrap_or_else(|| vec![0.0; model.m]);
    Ok(ControlPath::constant(chart.grid().to_vec(), &phi)?)
}

fn mc(cfg: &ExperimentConfig) -> MonteCarloSettings {
    let p = &cfg.pipeline;
    MonteCarloSettings {
        n_outer: p.n_outer,
        n_inner: p.n_inner,
        n_reference: p.n_reference,
        workers: cfg.estimator.workers,
        seed: cfg.estimator.seed,
        min_hits: p.min_hits,
    }
}

fn coord_header(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

fn coords(v: &[f64]) -> Vec<String> {
    v.iter().map(|a| num(*a)).collect()
}

#[derive(Serialize)]
struct PointResult<'a, T> {
    x: &'a [f64],
    result: T,
}

pub fn density(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut Artifacts) -> Run {
    let chart = chart(cfg, model)?;
    let xs = points(cfg, model);
    stage(&format!("density: {} at {} point(s), N = {}", model.name, xs.len(), cfg.estimator.n));
    let key = StreamKey::new(cfg.estimator.seed, "density");
    let res = terminal_density_grid(model, &chart, &xs, cfg.estimator.n, &key, &estimator(cfg))?;
    let mut header = coord_header("x", model.d);
    header.extend(["value", "std_error", "n_samples", "dropped", "tail_above"].map(String::from));
    let rows: Vec<Vec<String>> = xs
        .iter()
        .zip(&res)
        .map(|(x, r)| {
            let mut row = coords(x);
            row.extend([num(r.value), num(r.std_error), r.n_samples.to_string(), r.dropped.to_string(), r.tail.above.to_string()]);
            row
        })
        .collect();
    out.csv("density.csv", &header, &rows);
    let report: Vec<_> = xs.iter().zip(&res).map(|(x, r)| PointResult { x, result: *r }).collect();
    out.json("density.json", &report);
    Ok(())
}

pub fn conditional(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut Artifacts) -> Run {
    let chart = chart(cfg, model)?;
    let xs = points(cfg, model);
    let g_index = cfg.conditional.component.unwrap_or(if model.n > 0 { model.d } else { 0 });
    stage(&format!("conditional: E(Z_T[{g_index}] | X_T = x) for {}", model.name));
    let key = StreamKey::new(cfg.estimator.seed, "conditional");
    let outputs: Vec<usize> = (0..model.d).collect();
    let sampler = |i: u64| {
        let mut z = vec![0.0; chart.n()];
        key.normals(i, &mut z);
        let f = tangent_derivatives(model, &chart, &z, &outputs)?;
        let g = tangent_derivatives(model, &chart, &z, &[g_index])?;
        chart_draw(&chart, &z, &f, Some(&g), None)
    };
    let mut header = coord_header("x", model.d);
    header.extend(["numerator", "numerator_std_error", "density", "density_std_error", "ratio", "ratio_std_error"].map(String::from));
    let mut rows = Vec::new();
    let mut report = Vec::new();
    for x in &xs {
        let r = estimate_conditional(&sampler, x, cfg.estimator.n, &estimator(cfg))?;
        let mut row = coords(x);
        row.extend([
            num(r.numerator.value),
            num(r.numerator.std_error),
            num(r.denominator.value),
            num(r.denominator.std_error),
            opt(r.ratio),
            opt(r.ratio_std_error),
        ]);
        rows.push(row);
        report.push(PointResult { x, result: r });
    }
    out.csv("conditional.csv", &header, &rows);
    out.json("conditional.json", &report);
    Ok(())
}

fn skeleton_rows(skel: &SkeletonPath, phi: &ControlPath) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["t".to_string()];
    header.extend(coord_header("z", skel.dim));
    header.extend(coord_header("phi", phi.m));
    header.push("exact".into());
    let rows = skel
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut row = vec![num(*t)];
            row.extend(coords(skel.state(k)));
            row.extend(coords(phi.node(k)));
            row.push("true".into());
            row
        })
        .collect();
    (header, rows)
}

#[derive(Serialize)]
struct SkeletonSummary<'a> {
    model: &'a str,
    energy: f64,
    terminal: &'a [f64],
    max_residual: f64,
}

pub fn skeleton(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut Artifacts) -> Run {
    let chart = chart(cfg, model)?;
    let phi = control(cfg, model, &chart)?;
    stage(&format!("skeleton: {} with constant control {:?}", model.name, phi.node(0)));
    let skel = integrate_skeleton(model, &phi, &model.x0, chart.grid())?;
    let (header, rows) = skeleton_rows(&skel, &phi);
    out.csv("skeleton.csv", &header, &rows);
    out.json(
        "skeleton.json",
        &SkeletonSummary { model: &model.name, energy: phi.energy(), terminal: skel.terminal(), max_residual: skel.max_residual },
    );
    Ok(())
}

pub fn control_synthesis(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut Artifacts) -> Run {
    let chart = chart(cfg, model)?;
    let target = match (&cfg.control.target, cfg.points.first()) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(ConfigError::new("control.target", "a target point is required (or pass --x)").into()),
    };
    stage(&format!("control: {} along the line to {target:?}", model.name));
    let line = LinePath { from: model.x0[..model.d].to_vec(), to: target, horizon: cfg.grid.horizon };
    let syn = synthesize_control(model, &line, &model.x0[model.d..], chart.grid())?;
    let (header, rows) = skeleton_rows(&syn.skeleton, &syn.control);
    out.csv("control.csv", &header, &rows);
    out.json(
        "control.json",
        &SkeletonSummary { model: &model.name, energy: syn.energy, terminal: syn.skeleton.terminal(), max_residual: syn.skeleton.max_residual },
    );
    Ok(())
}

pub fn tube(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut Artifacts) -> Run {
    let chart = chart(cfg, model)?;
    let phi = control(cfg, model, &chart)?;
    let skel = integrate_skeleton(model, &phi, &model.x0, chart.grid())?;
    stage(&format!("tube: {} with eta = {}, N = {}", model.name, cfg.tube.eta, cfg.estimator.n));
    let key = StreamKey::new(cfg.estimator.seed, "tube");
    let est = tube_probability(model, &skel, cfg.tube.eta, cfg.estimator.n, &chart, &key, cfg.tube.monitoring, cfg.estimator.workers)?;
    let header = ["eta", "probability", "std_error", "n_paths", "monitoring"].map(String::from);
    let monitoring = match est.monitoring {
        ExitMonitoring::GridOnly => "grid-only",
        ExitMonitoring::BrownianBridge => "brownian-bridge",
    };
    out.csv(
        "tube.csv",
        &header,
        &[vec![num(cfg.tube.eta), num(est.probability), num(est.std_error), est.n_paths.to_string(), monitoring.into()]],
    );
    out.json("tube.json", &est);
    Ok(())
}

fn bound_rows(reports: &[LowerBoundReport], d: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = coord_header("y", d);
    header.extend(
        ["delta", "r", "lower_bound", "std_error", "reference", "reference_std_error", "verdict", "certified"].map(String::from),
    );
    let rows = reports
        .iter()
        .map(|r| {
            let mut row = coords(&r.y);
            row.extend([
                opt(r.delta),
                num(r.r),
                num(r.lower_bound),
                num(r.lower_bound_std_error),
                opt(r.reference_density.map(|e| e.value)),
                opt(r.reference_density.map(|e| e.std_error)),
                r.verdict.map(|v| v.to_string()).unwrap_or_default(),
                r.certified.to_string(),
            ]);
            row
        })
        .collect();
    (header, rows)
}

fn log_report(r: &LowerBoundReport) {
    stage(&format!(
        "{}: y = {:?}, lower bound {:.4e} (se {:.2e}), verdict {:?}",
        r.pipeline, r.y, r.lower_bound, r.lower_bound_std_error, r.verdict
    ));
}

pub fn lower_bound(cfg: &ExperimentConfig, model: &ModelSpec, out: &mut Artifacts) -> Run {
    let k = cfg.constants(model.d)?;
    let chart = chart(cfg, model)?;
    let p = &cfg.pipeline;
    let mc = mc(cfg);
    let ys = points(cfg, model);
    stage(&format!("lower-bound: pipeline {:?} on {}", p.kind, model.name));
    let reports = match p.kind {
        PipelineKind::Thpos => {
            let source =
                ModelSource::new(model, &chart, p.delta, DecompositionKind::Ito, OuterEvent::All, StreamKey::new(mc.seed, "thpos/outer"));
            let opts = ThposOptions { workers: mc.workers, seed: mc.seed, min_hits: mc.min_hits, ..ThposOptions::new(p.r, p.n_outer, p.n_inner) };
            let mut reports = Vec::new();
            for y in &ys {
                let mut rep = thpos_lower_bound(&source, y, &opts, &k)?;
                rep.attach_reference(reference_at(model, &chart, y, &mc)?);
                log_report(&rep);
                reports.push(rep);
            }
            reports
        }
        PipelineKind::ItoPos => {
            let c = ItoPositivityConfig {
                horizon: cfg.grid.horizon,
                steps: cfg.grid.steps,
                deltas: p.deltas.clone(),
                eta: p.eta,
                c_phi_floor: p.c_phi_floor,
                attain_tol: p.attain_tol,
                mc,
            };
            vec![ito_positivity_pipeline(model, &ys[0], &c, &k)?]
        }
        PipelineKind::ItoLb => {
            let c = ItoLowerBoundConfig {
                horizon: cfg.grid.horizon,
                steps: cfg.grid.steps,
                eta: p.eta,
                lambda_star: p.lambda_star,
                delta: p.delta,
                mu: p.mu,
                h: p.h,
                y_lo: p.y_lo.clone(),
                y_hi: p.y_hi.clone(),
                y_grid: p.y_grid,
                waiver: p.waiver,
                attain_tol: p.attain_tol,
                monitoring: p.monitoring,
                mc,
            };
            let phi = control(cfg, model, &chart)?;
            vec![ito_lowerbound_pipeline(model, &ys[0], &phi, &c, &k)?]
        }
        PipelineKind::Hormander => {
            let c = HormanderConfig {
                horizon: cfg.grid.horizon,
                steps: cfg.grid.steps,
                deltas: p.deltas.clone(),
                c_star: p.c_star,
                radius: p.radius,
                box_radius: p.box_radius,
                attain_tol: p.attain_tol,
                mc,
            };
            let phi = control(cfg, model, &chart)?;
            vec![hormander_pipeline(model, &ys[0], &phi, &c, &k)?]
        }
    };
    if p.kind != PipelineKind::Thpos {
        log_report(&reports[0]);
        let sweep = &reports[0].sweep;
        let header = ["delta", "r", "a_r", "event_probability", "gamma_hits", "theta_max", "lower_bound", "certified"].map(String::from);
        let rows: Vec<Vec<String>> = sweep
            .iter()
            .map(|s| {
                vec![
                    num(s.delta),
                    num(s.r),
                    num(s.a_r),
                    num(s.event_probability),
                    s.gamma_hits.to_string(),
                    num(s.theta_max),
                    num(s.lower_bound),
                    s.certified.to_string(),
                ]
            })
            .collect();
        out.csv("sweep.csv", &header, &rows);
    }
    let (header, rows) = bound_rows(&reports, model.d);
    out.csv("lower_bound.csv", &header, &rows);
    if reports.len() == 1 {
        out.json("report.json", &reports[0]);
    } else {
        out.json("report.json", &reports);
    }
    Ok(())
}

pub fn calibrate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Run {
    let eps = &cfg.calibrate.eps;
    stage(&format!("calibrate: quadratic family with {} member(s), safety {}", eps.len(), cfg.calibrate.safety));
    let family: Vec<_> = eps.iter().map(|e| quadratic_family_instance(*e, 2)).collect();
    let k = calibrate_constants(1, &family, cfg.calibrate.safety)?;
    let header = ["eps", "r_norm", "gap", "bound", "exact"].map(String::from);
    let mut rows = Vec::new();
    for (e, inst) in eps.iter().zip(&family) {
        let bound = epsilon_bound(&inst.m_g, inst.r_norm, &k)?;
        rows.push(vec![num(*e), num(inst.r_norm), num(inst.gap), num(bound), "true".into()]);
    }
    out.csv("calibration.csv", &header, &rows);
    out.json("constants.json", &k);
    stage(&format!("calibrate: C_d = {:.4e}, l_d = {:.4}", k.c_d, k.ell_d));
    Ok(())
}

struct Check {
    name: &'static str,
    value: f64,
    std_error: f64,
    reference: f64,
    pass: bool,
}

fn z_check(name: &'static str, r: &EstimatorResult, reference: f64, z: f64) -> Check {
    Check { name, value: r.value, std_error: r.std_error, reference, pass: (r.value - reference).abs() <= z * r.std_error }
}

/// A fixed battery of small runs with closed-form answers.
pub fn selftest(seed: u64, workers: usize, out: &mut Artifacts) -> Run {
    let opts = EstimatorOptions { workers, ..EstimatorOptions::default() };
    let mut checks = Vec::new();

    stage("selftest: standard normal density");
    let g = models::default_model("gaussian1d")?;
    let chart = GaussianChart::uniform(1.0, 4, 1)?;
    let r = terminal_density_grid(&g, &chart, &[vec![0.0]], 20_000, &StreamKey::new(seed, "selftest/normal"), &opts)?.remove(0);
    checks.push(z_check("normal_density_at_0", &r, 1.0 / (2.0 * std::f64::consts::PI).sqrt(), 4.0));

    stage("selftest: Kolmogorov density");
    let kol = models::default_model("kolmogorov")?;
    let chart = GaussianChart::uniform(1.0, 16, 1)?;
    let r = terminal_density_grid(&kol, &chart, &[vec![0.0, 0.0]], 10_000, &StreamKey::new(seed, "selftest/kolmogorov"), &opts)?.remove(0);
    // exact Gaussian density of the 16-step Euler scheme at the origin
    let k2 = 16.0f64 * 16.0;
    let det = (1.0 / 12.0) * (1.0 - 1.0 / k2);
    checks.push(z_check("kolmogorov_density_at_0", &r, 1.0 / (2.0 * std::f64::consts::PI * det.sqrt()), 4.0));

    stage("selftest: Brownian tube");
    let bm = models::default_model("bm1d")?;
    let chart = GaussianChart::uniform(1.0, 50, 1)?;
    let phi = ControlPath::zero(chart.grid().to_vec(), 1)?;
    let skel = integrate_skeleton(&bm, &phi, &bm.x0, chart.grid())?;
    let t = tube_probability(&bm, &skel, 1.0, 4000, &chart, &StreamKey::new(seed, "selftest/tube"), ExitMonitoring::BrownianBridge, workers)?;
    let p_exact = 0.370_777;
    checks.push(Check {
        name: "brownian_tube",
        value: t.probability,
        std_error: t.std_error,
        reference: p_exact,
        pass: (t.probability - p_exact).abs() <= 4.0 * t.std_error,
    });

    stage("selftest: skeleton round trip");
    let int = models::default_model("integrated1d")?;
    let grid: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
    let line = LinePath { from: vec![0.0], to: vec![1.5], horizon: 1.0 };
    let syn = synthesize_control(&int, &line, &[0.0], &grid)?;
    let back = integrate_skeleton(&int, &syn.control, &int.x0, &grid)?;
    let err = (0..grid.len()).map(|k| (back.state(k)[0] - syn.skeleton.state(k)[0]).abs()).fold(0.0, f64::max);
    checks.push(Check { name: "round_trip_sup_error", value: err, std_error: 0.0, reference: 0.0, pass: err <= 1e-6 });

    stage("selftest: calibration");
    let family: Vec<_> = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1].iter().map(|e| quadratic_family_instance(*e, 2)).collect();
    let k = calibrate_constants(1, &family, 2.0)?;
    let covered = family.iter().all(|i| epsilon_bound(&i.m_g, i.r_norm, &k).is_ok_and(|b| i.gap <= b));
    checks.push(Check { name: "calibrated_c_d", value: k.c_d, std_error: 0.0, reference: f64::NAN, pass: covered });

    let header = ["check", "value", "std_error", "reference", "pass"].map(String::from);
    let rows: Vec<Vec<String>> =
        checks.iter().map(|c| vec![c.name.into(), num(c.value), num(c.std_error), num(c.reference), c.pass.to_string()]).collect();
    out.csv("selftest.csv", &header, &rows);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if !failed.is_empty() {
        return Err(RunError::Check(failed.join(", ")));
    }
    Ok(())
}
