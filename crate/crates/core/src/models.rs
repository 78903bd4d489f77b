//! Named model registry. Each entry takes a parameter map whose unknown keys
//! are rejected; missing keys fall back to the listed defaults.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::expr::{cos, cst, sin, var};
use crate::sde::ModelSpec;

/// `(name, [(parameter, default)], summary)` for every registered model.
pub const REGISTRY: &[(&str, &[(&str, f64)], &str)] = &[
    ("bm1d", &[("sigma", 1.0), ("x0", 0.0)], "dX = sigma dW"),
    ("gaussian1d", &[], "X_1 = W_1, a standard normal at T = 1"),
    ("gaussian2d", &[], "two independent Brownian motions"),
    ("ou1d", &[("sigma", 1.0), ("kappa", 1.0), ("x0", 0.0)], "dX = sigma dW - kappa X dt"),
    ("gbm1d", &[("sigma", 0.3), ("mu", 0.05), ("x0", 1.0)], "dX = sigma X dW + mu X dt"),
    (
        "elliptic1d",
        &[("s0", 1.0), ("s1", 0.2), ("b0", 0.1), ("x0", 0.0)],
        "dX = (s0 + s1 sin X) dW + b0 cos X dt",
    ),
    (
        "elliptic2d",
        &[("s0", 1.0), ("s1", 0.2), ("b0", 0.3), ("x0", 0.0), ("y0", 0.0)],
        "two components with state-dependent diagonal noise and a coupling drift",
    ),
    ("kolmogorov", &[("sigma", 1.0), ("c", 1.0), ("x0", 0.0), ("y0", 0.0)], "dX1 = sigma dW, dX2 = c X1 dt"),
    (
        "hormander_trig",
        &[("s0", 1.0), ("s1", 0.1), ("b1", 0.1), ("c", 1.0), ("e", 0.1), ("x0", 0.0), ("y0", 0.0)],
        "dX1 = (s0 + s1 sin X2) dW + b1 cos X1 dt, dX2 = (c X1 + e sin X1) dt",
    ),
    (
        "integrated1d",
        &[("s0", 1.0), ("s1", 0.2), ("x0", 0.0), ("y0", 0.0)],
        "X elliptic with noise s0 + s1 sin Y, Y = int X dt as the extra state",
    ),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|e| e.0)
}

fn resolve(name: &str, params: &BTreeMap<String, f64>) -> Result<BTreeMap<&'static str, f64>> {
    let entry = REGISTRY
        .iter()
        .find(|e| e.0 == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown model `{name}`; known: {}", names().collect::<Vec<_>>().join(", "))))?;
    let mut out: BTreeMap<&'static str, f64> = entry.1.iter().copied().collect();
    for (k, v) in params {
        match entry.1.iter().find(|p| p.0 == k) {
            Some(p) => {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("model `{name}`: parameter `{k}` must be finite")));
                }
                out.insert(p.0, *v);
            }
            None => return Err(Error::InvalidArgument(format!("model `{name}` has no parameter `{k}`"))),
        }
    }
    Ok(out)
}

/// Builds a registered model.
pub fn build(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec> {
    let p = resolve(name, params)?;
    let g = |k: &str| p[k];
    match name {
        "bm1d" => ModelSpec::new(name, 1, 0, vec![vec![cst(g("sigma"))]], vec![cst(0.0)], vec![g("x0")]),
        "gaussian1d" => ModelSpec::new(name, 1, 0, vec![vec![cst(1.0)]], vec![cst(0.0)], vec![0.0]),
        "gaussian2d" => ModelSpec::new(
            name,
            2,
            0,
            vec![vec![cst(1.0), cst(0.0)], vec![cst(0.0), cst(1.0)]],
            vec![cst(0.0), cst(0.0)],
            vec![0.0, 0.0],
        ),
        "ou1d" => ModelSpec::new(name, 1, 0, vec![vec![cst(g("sigma"))]], vec![cst(-g("kappa")) * var(0)], vec![g("x0")]),
        "gbm1d" => ModelSpec::new(name, 1, 0, vec![vec![cst(g("sigma")) * var(0)]], vec![cst(g("mu")) * var(0)], vec![g("x0")])
            .map(|m| m.with_waiver(true)),
        "elliptic1d" => ModelSpec::new(
            name,
            1,
            0,
            vec![vec![cst(g("s0")) + cst(g("s1")) * sin(var(0))]],
            vec![cst(g("b0")) * cos(var(0))],
            vec![g("x0")],
        ),
        "elliptic2d" => ModelSpec::new(
            name,
            2,
            0,
            vec![
                vec![cst(g("s0")) + cst(g("s1")) * sin(var(1)), cst(0.0)],
                vec![cst(0.0), cst(g("s0")) + cst(g("s1")) * cos(var(0))],
            ],
            vec![cst(g("b0")) * sin(var(1)), cst(g("b0")) * cos(var(0))],
            vec![g("x0"), g("y0")],
        ),
        "kolmogorov" => ModelSpec::new(
            name,
            2,
            0,
            vec![vec![cst(g("sigma")), cst(0.0)]],
            vec![cst(0.0), cst(g("c")) * var(0)],
            vec![g("x0"), g("y0")],
        )
        .map(|m| m.with_waiver(true)),
        "hormander_trig" => ModelSpec::new(
            name,
            2,
            0,
            vec![vec![cst(g("s0")) + cst(g("s1")) * sin(var(1)), cst(0.0)]],
            vec![cst(g("b1")) * cos(var(0)), cst(g("c")) * var(0) + cst(g("e")) * sin(var(0))],
            vec![g("x0"), g("y0")],
        )
        .map(|m| m.with_waiver(true)),
        "integrated1d" => ModelSpec::new(
            name,
            1,
            1,
            vec![vec![cst(g("s0")) + cst(g("s1")) * sin(var(1)), cst(0.0)]],
            vec![cst(0.0), var(0)],
            vec![g("x0"), g("y0")],
        )
        .map(|m| m.with_waiver(true)),
        _ => unreachable!("registry and builder out of sync"),
    }
}

/// Builds a registered model with default parameters.
pub fn default_model(name: &str) -> Result<ModelSpec> {
    build(name, &BTreeMap::new())
}
