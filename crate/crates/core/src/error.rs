use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("kernel singular at the origin (d = {dim})")]
    SingularKernel { dim: usize },

    #[error("singular matrix `{name}` (det = {det:e})")]
    SingularMatrix { name: String, det: f64 },

    #[error("localizer vanishes at x = {x} (a = {a}); log-derivative undefined")]
    LocalizerVanishes { a: f64, x: f64 },

    #[error("missing derivative data: {0}")]
    MissingDerivatives(&'static str),

    #[error("unsupported derivative order {0} (at most 2)")]
    UnsupportedOrder(usize),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("delta = {delta} is not aligned with the time grid")]
    GridMisaligned { delta: f64 },

    #[error("not enough samples: {0}")]
    NotEnoughSamples(String),

    #[error("singular control map at t = {t}: smallest eigenvalue of sigma sigma^T is {min_eig:e}")]
    SingularControl { t: f64, min_eig: f64 },

    #[error("skeleton blow-up at t = {t}")]
    BlowUp { t: f64 },

    #[error("model is not of the required shape: {0}")]
    ModelShape(String),

    #[error("pipeline refused: {0}")]
    Refused(String),
}

pub type Result<T> = std::result::Result<T, Error>;
