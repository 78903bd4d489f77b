//! Small symbolic expression trees for coefficient fields.
//!
//! Coefficients are built from constants, state variables and a handful of
//! elementary functions. Derivatives are taken symbolically once, when a
//! field is compiled, and entries that turn out constant are cached as plain
//! numbers so that the per-step evaluation cost stays low.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Powi(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
}

pub fn cst(v: f64) -> Expr {
    Expr::Const(v)
}

pub fn var(i: usize) -> Expr {
    Expr::Var(i)
}

pub fn sin(e: Expr) -> Expr {
    match e {
        Expr::Const(v) => Expr::Const(v.sin()),
        e => Expr::Sin(Box::new(e)),
    }
}

pub fn cos(e: Expr) -> Expr {
    match e {
        Expr::Const(v) => Expr::Const(v.cos()),
        e => Expr::Cos(Box::new(e)),
    }
}

pub fn exp(e: Expr) -> Expr {
    match e {
        Expr::Const(v) => Expr::Const(v.exp()),
        e => Expr::Exp(Box::new(e)),
    }
}

pub fn powi(e: Expr, k: i32) -> Expr {
    match (e, k) {
        (_, 0) => Expr::Const(1.0),
        (e, 1) => e,
        (Expr::Const(v), k) => Expr::Const(v.powi(k)),
        (e, k) => Expr::Powi(Box::new(e), k),
    }
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, o: Expr) -> Expr {
        match (self, o) {
            (Expr::Const(a), Expr::Const(b)) => Expr::Const(a + b),
            (Expr::Const(z), e) | (e, Expr::Const(z)) if z == 0.0 => e,
            (a, b) => Expr::Add(Box::new(a), Box::new(b)),
        }
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, o: Expr) -> Expr {
        match (self, o) {
            (Expr::Const(a), Expr::Const(b)) => Expr::Const(a * b),
            (Expr::Const(z), _) | (_, Expr::Const(z)) if z == 0.0 => Expr::Const(0.0),
            (Expr::Const(u), e) | (e, Expr::Const(u)) if u == 1.0 => e,
            (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        match self {
            Expr::Const(v) => Expr::Const(-v),
            Expr::Neg(e) => *e,
            e => Expr::Neg(Box::new(e)),
        }
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, o: Expr) -> Expr {
        self + (-o)
    }
}

impl Expr {
    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Add(a, b) | Expr::Mul(a, b) => match (a.max_var(), b.max_var()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
            Expr::Neg(a) | Expr::Powi(a, _) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) => a.max_var(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Neg(a) => -a.eval(x),
            Expr::Powi(a, k) => a.eval(x).powi(*k),
            Expr::Sin(a) => a.eval(x).sin(),
            Expr::Cos(a) => a.eval(x).cos(),
            Expr::Exp(a) => a.eval(x).exp(),
        }
    }

    /// Symbolic partial derivative with respect to variable `v`.
    pub fn diff(&self, v: usize) -> Expr {
        match self {
            Expr::Const(_) => cst(0.0),
            Expr::Var(i) => cst(if *i == v { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => a.diff(v) + b.diff(v),
            Expr::Mul(a, b) => a.diff(v) * (**b).clone() + (**a).clone() * b.diff(v),
            Expr::Neg(a) => -a.diff(v),
            Expr::Powi(a, k) => cst(*k as f64) * powi((**a).clone(), k - 1) * a.diff(v),
            Expr::Sin(a) => cos((**a).clone()) * a.diff(v),
            Expr::Cos(a) => -(sin((**a).clone()) * a.diff(v)),
            Expr::Exp(a) => exp((**a).clone()) * a.diff(v),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Var(i) => write!(f, "z{i}"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Mul(a, b) => write!(f, "{a}*{b}"),
            Expr::Neg(a) => write!(f, "-{a}"),
            Expr::Powi(a, k) => write!(f, "{a}^{k}"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
        }
    }
}

/// An entry that is either a cached constant or an expression to evaluate.
#[derive(Clone, Debug)]
enum Slot {
    Fixed(f64),
    Live(Expr),
}

impl Slot {
    fn new(e: Expr) -> Slot {
        match e.as_const() {
            Some(v) => Slot::Fixed(v),
            None => Slot::Live(e),
        }
    }

    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Slot::Fixed(v) => *v,
            Slot::Live(e) => e.eval(x),
        }
    }
}

/// A vector field `R^dim -> R^len` with compiled first and second derivatives.
#[derive(Clone, Debug)]
pub struct CompiledField {
    pub dim: usize,
    exprs: Vec<Expr>,
    val: Vec<Slot>,
    grad: Vec<Slot>,
    hess: Vec<Slot>,
    grad_const: bool,
    hess_zero: bool,
}

impl CompiledField {
    pub fn new(exprs: Vec<Expr>, dim: usize) -> CompiledField {
        let len = exprs.len();
        let mut grad = Vec::with_capacity(len * dim);
        let mut hess = Vec::with_capacity(len * dim * dim);
        for e in &exprs {
            for a in 0..dim {
                let da = e.diff(a);
                for b in 0..dim {
                    hess.push(Slot::new(da.diff(b)));
                }
                grad.push(Slot::new(da));
            }
        }
        let grad_const = grad.iter().all(|s| matches!(s, Slot::Fixed(_)));
        let hess_zero = hess.iter().all(|s| matches!(s, Slot::Fixed(v) if *v == 0.0));
        CompiledField {
            dim,
            val: exprs.iter().cloned().map(Slot::new).collect(),
            exprs,
            grad,
            hess,
            grad_const,
            hess_zero,
        }
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    /// True when the field is affine, so its Hessian vanishes identically.
    pub fn hessian_vanishes(&self) -> bool {
        self.hess_zero
    }

    pub fn gradient_is_constant(&self) -> bool {
        self.grad_const
    }

    pub fn value(&self, x: &[f64], out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.val) {
            *o = s.eval(x);
        }
    }

    /// Row-major `len x dim` Jacobian.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.grad) {
            *o = s.eval(x);
        }
    }

    /// Entries `[(i * dim + a) * dim + b] = d^2 f_i / dx_a dx_b`.
    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        if self.hess_zero {
            out[..self.hess.len()].fill(0.0);
            return;
        }
        for (o, s) in out.iter_mut().zip(&self.hess) {
            *o = s.eval(x);
        }
    }
}
