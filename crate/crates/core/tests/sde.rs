use std::collections::BTreeMap;

use wiener_density::expr::{cst, var};
use wiener_density::malliavin::{GaussianChart, WeightInputs};
use wiener_density::mc::{Moments, StreamKey};
use wiener_density::models::{build, default_model};
use wiener_density::sde::*;
use wiener_density::Error;

fn normals(seed: u64, i: u64, n: usize) -> Vec<f64> {
    let mut z = vec![0.0; n];
    StreamKey::new(seed, "sde-tests").normals(i, &mut z);
    z
}

#[test]
fn deterministic_drift_is_exact() {
    let m = ModelSpec::new("ode", 1, 0, vec![vec![cst(0.0)]], vec![cst(0.7)], vec![0.2]).unwrap();
    let ch = GaussianChart::uniform(2.0, 10, 1).unwrap();
    let p = euler_simulate(&m, &ch, &normals(1, 0, 10)).unwrap();
    assert!((p.terminal()[0] - (0.2 + 1.4)).abs() < 1e-14);
}

#[test]
fn brownian_motion_sums_increments() {
    let m = default_model("bm1d").unwrap();
    let ch = GaussianChart::uniform(1.0, 16, 1).unwrap();
    let z = normals(2, 0, 16);
    let p = euler_simulate(&m, &ch, &z).unwrap();
    let expect: f64 = z.iter().map(|v| v * (1.0f64 / 16.0).sqrt()).sum();
    assert!((p.terminal()[0] - expect).abs() < 1e-14);
    let f = tangent_derivatives(&m, &ch, &z, &[0]).unwrap();
    assert!(f.jac.iter().all(|v| (v - 0.25).abs() < 1e-15));
    assert!(f.hess.unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn overflow_reports_step() {
    let m = ModelSpec::new("blow", 1, 0, vec![vec![cst(0.0)]], vec![var(0) * var(0) * var(0)], vec![10.0]).unwrap();
    let ch = GaussianChart::uniform(1.0, 50, 1).unwrap();
    assert!(matches!(euler_simulate(&m, &ch, &vec![0.0; 50]), Err(Error::NonFinite { .. })));
}

#[test]
fn kolmogorov_moments() {
    let m = default_model("kolmogorov").unwrap();
    let steps = 200;
    let ch = GaussianChart::uniform(1.0, steps, 1).unwrap();
    let (mut v1, mut v2, mut c12) = (Moments::default(), Moments::default(), Moments::default());
    let n = 100_000;
    for i in 0..n {
        let p = euler_simulate(&m, &ch, &normals(3, i, steps)).unwrap();
        let x = p.terminal();
        v1.push(x[0] * x[0]);
        v2.push(x[1] * x[1]);
        c12.push(x[0] * x[1]);
    }
    // discrete-scheme values, which converge to 1, 1/3 and 1/2
    let dt = 1.0 / steps as f64;
    let s2: f64 = (0..steps).map(|k| (k as f64 * dt).powi(2) * dt).sum();
    let s1: f64 = (0..steps).map(|k| k as f64 * dt * dt).sum();
    for (mo, exact, limit) in [(v1, 1.0, 1.0), (v2, s2, 1.0 / 3.0), (c12, s1, 0.5)] {
        assert!((mo.mean - exact).abs() < 3.0 * mo.std_error(), "{} vs {exact}", mo.mean);
        assert!((exact - limit).abs() < 0.01 * limit);
    }
}

#[test]
fn linear_model_weak_moments() {
    // OU: E X_T = x0 e^{-kT}; Euler mean is x0 (1 - k dt)^N exactly
    let mut p = BTreeMap::new();
    p.insert("x0".to_string(), 1.0);
    let m = build("ou1d", &p).unwrap();
    let steps = 50;
    let ch = GaussianChart::uniform(1.0, steps, 1).unwrap();
    let mut mo = Moments::default();
    let mut var = Moments::default();
    for i in 0..100_000 {
        let x = euler_simulate(&m, &ch, &normals(4, i, steps)).unwrap().terminal()[0];
        mo.push(x);
        var.push(x * x);
    }
    let mean = (1.0f64 - 0.02).powi(50);
    assert!((mo.mean - mean).abs() < 3.0 * mo.std_error());
    let a = (1.0f64 - 0.02).powi(2);
    let v: f64 = (0..steps).map(|k| 0.02 * a.powi(k as i32)).sum();
    assert!((var.mean - (v + mean * mean)).abs() < 3.0 * var.std_error());
}

fn fd_check(model: &ModelSpec, ch: &GaussianChart, z: &[f64], outputs: &[usize]) -> f64 {
    let f = tangent_derivatives(model, ch, z, outputs).unwrap();
    let n = ch.n();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let scale = f.jac.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-3);
    let hscale = f.hess.as_ref().unwrap().iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-3);
    for k in 0..n {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[k] += h;
        zm[k] -= h;
        let fp = tangent_derivatives(model, ch, &zp, outputs).unwrap();
        let fm = tangent_derivatives(model, ch, &zm, outputs).unwrap();
        for (o, _) in outputs.iter().enumerate() {
            let d = (fp.value[o] - fm.value[o]) / (2.0 * h);
            worst = worst.max((d - f.jac[o * n + k]).abs() / scale);
            for l in 0..n {
                let dd = (fp.jac[o * n + l] - fm.jac[o * n + l]) / (2.0 * h);
                worst = worst.max((dd - f.hess.as_ref().unwrap()[(o * n + k) * n + l]).abs() / hscale);
            }
        }
    }
    worst
}

#[test]
fn geometric_model_matches_finite_differences() {
    let m = default_model("gbm1d").unwrap();
    let ch = GaussianChart::uniform(1.0, 12, 1).unwrap();
    assert!(fd_check(&m, &ch, &normals(5, 0, 12), &[0]) < 1e-5);
}

#[test]
fn tangent_matches_finite_differences_on_random_instances() {
    let names = ["elliptic1d", "elliptic2d", "hormander_trig", "integrated1d", "gbm1d"];
    let key = StreamKey::new(6, "params");
    for inst in 0..100u64 {
        let name = names[inst as usize % names.len()];
        let mut u = [0.0; 4];
        key.normals(inst, &mut u);
        let mut p = BTreeMap::new();
        match name {
            "elliptic1d" => {
                p.insert("s1".into(), 0.3 * u[0]);
                p.insert("b0".into(), 0.5 * u[1]);
            }
            "elliptic2d" => {
                p.insert("s1".into(), 0.3 * u[0]);
                p.insert("b0".into(), 0.5 * u[1]);
            }
            "hormander_trig" => {
                p.insert("s1".into(), 0.3 * u[0]);
                p.insert("e".into(), 0.5 * u[1]);
            }
            "integrated1d" => {
                p.insert("s1".into(), 0.3 * u[0]);
            }
            _ => {
                p.insert("sigma".into(), 0.3 + 0.1 * u[0].abs());
            }
        }
        let m = build(name, &p).unwrap();
        let steps = 6;
        let ch = GaussianChart::uniform(1.0, steps, m.m).unwrap();
        let z = normals(7, inst, ch.n());
        let outputs: Vec<usize> = (0..m.dim()).collect();
        let err = fd_check(&m, &ch, &z, &outputs);
        assert!(err < 1e-5, "{name} instance {inst}: {err}");
    }
}

#[test]
fn kolmogorov_sensitivity_is_time_to_go() {
    let m = default_model("kolmogorov").unwrap();
    let steps = 100;
    let ch = GaussianChart::uniform(1.0, steps, 1).unwrap();
    let f = tangent_derivatives(&m, &ch, &normals(8, 0, steps), &[0, 1]).unwrap();
    let dt: f64 = 0.01;
    for k in 0..steps {
        let cont = (1.0 - ch.t(k)) * dt.sqrt();
        assert!((f.jac[steps + k] - cont).abs() <= dt * dt.sqrt() + 1e-15);
    }
}

fn assert_inputs_close(a: &WeightInputs<f64>, b: &WeightInputs<f64>) {
    let close = |x: &[f64], y: &[f64], what: &str| {
        let s = x.iter().chain(y).fold(1.0f64, |m, v| m.max(v.abs()));
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-10 * s, "{what}: {p} vs {q}");
        }
    };
    close(&a.sigma, &b.sigma, "sigma");
    close(&a.zj, &b.zj, "zj");
    close(&a.trace, &b.trace, "trace");
    close(&a.m3, &b.m3, "m3");
}

#[test]
fn adjoint_pass_matches_full_tensors() {
    for (name, outputs) in [
        ("elliptic1d", vec![0]),
        ("elliptic2d", vec![0, 1]),
        ("hormander_trig", vec![0, 1]),
        ("integrated1d", vec![0]),
        ("integrated1d", vec![0, 1]),
        ("kolmogorov", vec![0, 1]),
        ("gbm1d", vec![0]),
    ] {
        let m = default_model(name).unwrap();
        let ch = GaussianChart::uniform(1.0, 20, m.m).unwrap();
        for i in 0..3 {
            let z = normals(9, i, ch.n());
            let f = tangent_derivatives(&m, &ch, &z, &outputs).unwrap();
            let full = WeightInputs::from_tensors(f.dim, f.n, &z, &f.jac, f.hess.as_ref().unwrap(), 1.0, &vec![0.0; f.n]);
            let (val, adj) = terminal_weight_inputs(&m, &ch, &z, &outputs).unwrap();
            assert_eq!(val, f.value);
            assert_inputs_close(&full, &adj);
        }
    }
}

#[test]
fn ito_decomposition_constant_coefficients() {
    let m = ModelSpec::new("const", 1, 0, vec![vec![cst(2.0)]], vec![cst(0.5)], vec![0.0]).unwrap();
    let ch = GaussianChart::uniform(1.0, 32, 1).unwrap();
    let z = normals(10, 0, 32);
    let dec = decompose_ito(&m, &ch, &z, 0.25).unwrap();
    assert_eq!(dec.inner_steps, 8);
    assert!((dec.c_delta[(0, 0)] - 4.0 * 0.25).abs() < 1e-14);
    let rs = dec.remainder(&m, &z[24..], true).unwrap();
    assert!((rs.r[0] - 0.5 * 0.25).abs() < 1e-13);
    let th = conditional_theta(&m, &dec, 2, 16, &StreamKey::new(1, "inner")).unwrap();
    assert!((th.value - 0.25 * 0.5).abs() < 1e-12, "{}", th.value);
    assert!(th.std_error.abs() < 1e-12);

    let pure = ModelSpec::new("pure", 1, 0, vec![vec![cst(2.0)]], vec![cst(0.0)], vec![0.0]).unwrap();
    let dec = decompose_ito(&pure, &ch, &z, 0.25).unwrap();
    let th = conditional_theta(&pure, &dec, 3, 4, &StreamKey::new(1, "inner")).unwrap();
    assert!(th.value < 1e-14);
    assert!(matches!(decompose_ito(&pure, &ch, &z, 0.3), Err(Error::GridMisaligned { .. })));
}

#[test]
fn decomposition_identity_is_pathwise() {
    for name in ["elliptic1d", "elliptic2d", "integrated1d"] {
        let m = default_model(name).unwrap();
        let ch = GaussianChart::uniform(1.0, 64, m.m).unwrap();
        for i in 0..5 {
            let z = normals(11, i, ch.n());
            let full = euler_simulate(&m, &ch, &z).unwrap();
            let dec = decompose_ito(&m, &ch, &z, 0.125).unwrap();
            let inner = &z[z.len() - dec.n_inner()..];
            let rs = dec.remainder(&m, inner, false).unwrap();
            let g = dec.gaussian_part(inner);
            for a in 0..m.d {
                let f = full.terminal()[a];
                assert!((f - (dec.f_past[a] + g[a] + rs.r[a])).abs() <= 1e-12 * (1.0 + f.abs()));
            }
            let sst = m.sigma_sigma_t(&dec.outer_state) * 0.125;
            assert!((sst - &dec.c_delta).norm() < 1e-13);
        }
    }
}

#[test]
fn hormander_decomposition_identity_and_covariance() {
    let m = default_model("hormander_trig").unwrap();
    let ch = GaussianChart::uniform(1.0, 64, 1).unwrap();
    let skel_past = [0.1, -0.2];
    let skel_end = [0.3, 0.05];
    for i in 0..5 {
        let z = normals(12, i, 64);
        let full = euler_simulate(&m, &ch, &z).unwrap();
        let dec = decompose_hormander(&m, &ch, &z, 0.25, &skel_past, &skel_end).unwrap();
        let inner = &z[48..];
        let rs = dec.remainder(&m, inner, false).unwrap();
        let g = dec.gaussian_part(inner);
        for a in 0..2 {
            let f = full.terminal()[a] - skel_end[a];
            assert!((f - (dec.f_past[a] + g[a] + rs.r[a])).abs() <= 1e-12 * (1.0 + f.abs()));
        }
    }
    // constant coefficients: conditional variance of G^2 tends to delta^3 / 3
    let k = default_model("kolmogorov").unwrap();
    for steps in [64usize, 256, 1024] {
        let ch = GaussianChart::uniform(1.0, steps, 1).unwrap();
        let dec = decompose_hormander(&k, &ch, &vec![0.0; steps], 0.5, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let exact = 0.125 / 3.0;
        assert!((dec.c_delta[(1, 1)] - exact).abs() < 2.0 / (steps as f64 * 0.5) * exact);
    }
    let c = hormander_covariance(1.0, 1.0, 0.3);
    assert!((c.determinant() - 0.3f64.powi(4) / 12.0).abs() < 1e-15);
    assert!(decompose_hormander(&default_model("elliptic2d").unwrap(), &ch_one(), &[0.0; 8], 0.5, &[0.0; 2], &[0.0; 2]).is_err());
}

fn ch_one() -> GaussianChart {
    GaussianChart::uniform(1.0, 4, 2).unwrap()
}

#[test]
fn remainder_second_moment_scales_like_delta_squared() {
    let m = default_model("elliptic1d").unwrap();
    let steps = 1024;
    let ch = GaussianChart::uniform(1.0, steps, 1).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for e in 3..=7 {
        let delta = 0.5f64.powi(e);
        let mut mo = Moments::default();
        for i in 0..3000 {
            let z = normals(13, i, steps);
            let dec = decompose_ito(&m, &ch, &z, delta).unwrap();
            let inner = &z[steps - dec.n_inner()..];
            let r = dec.remainder(&m, inner, false).unwrap().r[0];
            mo.push(r * r);
        }
        xs.push(delta.ln());
        ys.push(mo.mean.ln());
    }
    let slope = ols_slope(&xs, &ys);
    assert!((slope - 2.0).abs() < 0.15, "slope {slope}");
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn gate_rejects_early() {
    let m = ModelSpec::new("const", 1, 0, vec![vec![cst(1.0)]], vec![cst(1.0)], vec![0.0]).unwrap();
    let ch = GaussianChart::uniform(1.0, 16, 1).unwrap();
    let dec = decompose_ito(&m, &ch, &vec![0.0; 16], 0.5).unwrap();
    let th = conditional_theta_gated(&m, &dec, 2, 100, &StreamKey::new(2, "g"), Some(0.01)).unwrap();
    assert!(th.rejected_early && th.inner_samples < 100);
}

#[test]
fn bounded_scan_reports_magnitudes() {
    let m = default_model("elliptic1d").unwrap();
    let b = m.scan_bounds(&[-3.0], &[3.0], 601).unwrap();
    assert!((b.value - 1.2).abs() < 1e-3);
    assert!((b.first - 0.2).abs() < 1e-3);
}
