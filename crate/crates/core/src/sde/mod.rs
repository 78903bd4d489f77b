//! Euler simulation of diffusions with exact pathwise derivatives, and the
//! short-time decompositions used by the lower-bound machinery.

mod decompose;
mod engine;
mod model;

pub use decompose::{
    check_h1_shape, conditional_theta, conditional_theta_gated, decompose_hormander, decompose_ito, hormander_covariance,
    Decomposition, RemainderSample, ThetaEstimate,
};
pub use engine::{euler_from, euler_simulate, tangent_derivatives, tangent_from, terminal_weight_inputs, Path, Tangent};
pub use model::{FieldBounds, ModelSpec, StepEval};
