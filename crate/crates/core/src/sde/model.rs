use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{CompiledField, Expr};

/// Coefficients of the system
/// `dX = sum_j sigma_j(X, Y) dW^j + b(X, Y) dt`,
/// `dY = sum_j alpha_j(X, Y) dW^j + beta(X, Y) dt`
/// on the joint state `z = (X, Y)` of dimension `d + n`.
///
/// Field `j` of `sigma` stacks `(sigma_j, alpha_j)`; `drift` stacks `(b, beta)`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub x0: Vec<f64>,
    /// Set when the caller accepts coefficients that are only bounded on the
    /// experiment box (for instance linear drifts).
    pub unbounded_waiver: bool,
    sigma: Vec<CompiledField>,
    drift: CompiledField,
}

impl ModelSpec {
    pub fn new(name: &str, d: usize, n: usize, sigma: Vec<Vec<Expr>>, drift: Vec<Expr>, x0: Vec<f64>) -> Result<Self> {
        let dim = d + n;
        if d == 0 || sigma.is_empty() {
            return Err(Error::ModelShape(format!("{name}: need d >= 1 and at least one driving component")));
        }
        if x0.len() != dim {
            return Err(Error::DimensionMismatch { what: "initial state", expected: dim, got: x0.len() });
        }
        if drift.len() != dim {
            return Err(Error::DimensionMismatch { what: "drift components", expected: dim, got: drift.len() });
        }
        for (j, s) in sigma.iter().enumerate() {
            if s.len() != dim {
                return Err(Error::ModelShape(format!("{name}: diffusion field {j} has {} components, expected {dim}", s.len())));
            }
        }
        let all = sigma.iter().flatten().chain(drift.iter());
        if let Some(v) = all.filter_map(|e| e.max_var()).max() {
            if v >= dim {
                return Err(Error::ModelShape(format!("{name}: coefficient references z{v} but the state has {dim} components")));
            }
        }
        Ok(ModelSpec {
            name: name.to_string(),
            d,
            n,
            m: sigma.len(),
            x0,
            unbounded_waiver: false,
            sigma: sigma.into_iter().map(|s| CompiledField::new(s, dim)).collect(),
            drift: CompiledField::new(drift, dim),
        })
    }

    pub fn with_waiver(mut self, waiver: bool) -> Self {
        self.unbounded_waiver = waiver;
        self
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Result<Self> {
        if x0.len() != self.dim() {
            return Err(Error::DimensionMismatch { what: "initial state", expected: self.dim(), got: x0.len() });
        }
        self.x0 = x0;
        Ok(self)
    }

    /// Joint state dimension `d + n`.
    pub fn dim(&self) -> usize {
        self.d + self.n
    }

    pub fn sigma_field(&self, j: usize) -> &CompiledField {
        &self.sigma[j]
    }

    pub fn drift_field(&self) -> &CompiledField {
        &self.drift
    }

    pub fn sigma_exprs(&self, j: usize) -> &[Expr] {
        self.sigma[j].exprs()
    }

    pub fn drift_exprs(&self) -> &[Expr] {
        self.drift.exprs()
    }

    /// True when every coefficient is affine in the state.
    pub fn second_derivatives_vanish(&self) -> bool {
        self.drift.hessian_vanishes() && self.sigma.iter().all(|s| s.hessian_vanishes())
    }

    /// True when the diffusion fields do not depend on the state.
    pub fn additive_noise(&self) -> bool {
        self.sigma.iter().all(|s| s.hessian_vanishes() && s.gradient_is_constant() && s.exprs().iter().all(|e| e.as_const().is_some()))
    }

    /// The `d x m` matrix of X-diffusion coefficients at `z`.
    pub fn diffusion_matrix(&self, z: &[f64]) -> DMatrix<f64> {
        let dim = self.dim();
        let mut buf = vec![0.0; dim];
        let mut out = DMatrix::zeros(self.d, self.m);
        for j in 0..self.m {
            self.sigma[j].value(z, &mut buf);
            for i in 0..self.d {
                out[(i, j)] = buf[i];
            }
        }
        out
    }

    /// `sigma sigma^T (z)`, the `d x d` X-block of the diffusion.
    pub fn sigma_sigma_t(&self, z: &[f64]) -> DMatrix<f64> {
        let s = self.diffusion_matrix(z);
        &s * s.transpose()
    }

    pub fn eval(&self, z: &[f64], order: usize, ws: &mut StepEval) {
        let dim = self.dim();
        for j in 0..self.m {
            self.sigma[j].value(z, &mut ws.s[j * dim..(j + 1) * dim]);
            if order >= 1 {
                self.sigma[j].gradient(z, &mut ws.ds[j * dim * dim..(j + 1) * dim * dim]);
            }
            if order >= 2 {
                self.sigma[j].hessian(z, &mut ws.d2s[j * dim * dim * dim..(j + 1) * dim * dim * dim]);
            }
        }
        self.drift.value(z, &mut ws.b);
        if order >= 1 {
            self.drift.gradient(z, &mut ws.db);
        }
        if order >= 2 {
            self.drift.hessian(z, &mut ws.d2b);
        }
    }

    /// Largest magnitudes of coefficients and their first two derivatives
    /// over a tensor grid of `per_axis` points per axis on `[lo, hi]`.
    pub fn scan_bounds(&self, lo: &[f64], hi: &[f64], per_axis: usize) -> Result<FieldBounds> {
        let dim = self.dim();
        if lo.len() != dim || hi.len() != dim {
            return Err(Error::DimensionMismatch { what: "scan box", expected: dim, got: lo.len().min(hi.len()) });
        }
        let per_axis = per_axis.max(2);
        let mut ws = StepEval::new(dim, self.m);
        let mut out = FieldBounds::default();
        let total = per_axis.pow(dim as u32);
        let mut z = vec![0.0; dim];
        for idx in 0..total {
            let mut r = idx;
            for a in 0..dim {
                let k = r % per_axis;
                r /= per_axis;
                z[a] = lo[a] + (hi[a] - lo[a]) * k as f64 / (per_axis - 1) as f64;
            }
            self.eval(&z, 2, &mut ws);
            let mx = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            out.value = out.value.max(mx(&ws.s)).max(mx(&ws.b));
            out.first = out.first.max(mx(&ws.ds)).max(mx(&ws.db));
            out.second = out.second.max(mx(&ws.d2s)).max(mx(&ws.d2b));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct FieldBounds {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

/// Scratch buffers for one coefficient evaluation.
///
/// Layouts: `s[j * D + i]`, `ds[(j * D + i) * D + a]`,
/// `d2s[((j * D + i) * D + a) * D + b]`, and likewise for the drift.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub s: Vec<f64>,
    pub ds: Vec<f64>,
    pub d2s: Vec<f64>,
    pub b: Vec<f64>,
    pub db: Vec<f64>,
    pub d2b: Vec<f64>,
}

impl StepEval {
    pub fn new(dim: usize, m: usize) -> Self {
        StepEval {
            s: vec![0.0; m * dim],
            ds: vec![0.0; m * dim * dim],
            d2s: vec![0.0; m * dim * dim * dim],
            b: vec![0.0; dim],
            db: vec![0.0; dim * dim],
            d2b: vec![0.0; dim * dim * dim],
        }
    }
}
