use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A coefficient or functional evaluation produced NaN/inf.
    #[error("non-finite value in {context} at point {point:?}")]
    NonFinite { context: String, point: Vec<f64> },

    /// Joint diffusion matrix is numerically singular where an inverse is
    /// required (reciprocal condition number below threshold) and the vector
    /// being weighted does not lie in its range.
    #[error("singular diffusion in {context}: rcond = {rcond:.3e}")]
    SingularDiffusion { context: String, rcond: f64 },

    /// A Poisson cell problem was posed with a right-hand side whose
    /// rho-average is not (numerically) zero.
    #[error("cell problem right-hand side violates centering: |<rhs>_rho| = {defect:.3e} (tol {tol:.3e})")]
    CenteringViolated { defect: f64, tol: f64 },

    /// Linear solve failed (factorization broke down or iteration stalled).
    #[error("linear solve failed in {context}: {detail}")]
    LinearSolve { context: String, detail: String },

    /// A compatibility condition required by a backward functional does not
    /// hold for the supplied coefficients.
    #[error("compatibility condition {condition} violated: residual {residual:.3e} (tol {tol:.3e})")]
    Incompatible {
        condition: String,
        residual: f64,
        tol: f64,
    },

    /// An epsilon-level integrand failed the two-epsilon invariance check,
    /// i.e. the reduced form does not agree with the explicitly scaled form.
    #[error("functional integrand is not epsilon-free: max deviation {deviation:.3e}")]
    DivergentFunctional { deviation: f64 },

    /// Shape / dimension mismatch in user input.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Too many Monte Carlo paths left the truncated domain.
    #[error("{frac:.2}% of paths left the truncation box (limit {limit:.2}%); run invalid")]
    Truncation { frac: f64, limit: f64 },

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),

    /// Unknown model, functional, or rule name.
    #[error("unknown {kind}: {name}")]
    Unknown { kind: String, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
