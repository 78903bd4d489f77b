//! Density estimation and density lower bounds for functionals of finitely
//! many Gaussian increments.
//!
//! The crate is organised bottom-up: closed-form [`kernels`], finite
//! dimensional Malliavin calculus in [`malliavin`], Monte Carlo estimators in
//! [`riesz`], Euler simulation with pathwise derivatives in [`sde`], the
//! deterministic control layer in [`skeleton`] and the lower-bound machinery
//! in [`bounds`].

pub mod error;
pub mod expr;
pub mod kernels;
pub mod linalg;
pub mod malliavin;
pub mod models;
pub mod mc;
pub mod quadrature;
pub mod riesz;
pub mod scalar;
pub mod sde;
pub mod skeleton;
pub mod bounds;
pub mod special;

pub use error::{Error, Result};
