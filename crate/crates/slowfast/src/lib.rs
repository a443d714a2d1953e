//! Numerics for second-order singularly perturbed ("slow/fast") diffusions
//!
//!   dX = [b + (1/eps) f] dt + sigma dW
//!   dY = [(1/eps) g + (1/eps^2) c] dt + (1/eps) eta dW
//!
//! The crate solves the fast-scale cell problems (pseudo-stationary density
//! rho and Poisson correctors phi), computes the averaged slow dynamics
//! dX = w dt + A^{1/2} dB together with the extended-system coefficients that
//! govern forward/backward path functionals (Girsanov log-densities, entropy
//! production, housekeeping heat), and provides a Monte Carlo engine plus a
//! statistical harness for integral-fluctuation, martingale, and convergence
//! checks.
//!
//! Modules roughly follow the pipeline:
//! [`model`] -> [`cell`] -> [`averaging`] -> [`functionals`] -> [`path`] -> [`harness`].

pub mod averaging;
pub mod catalog;
pub mod cell;
pub mod density;
pub mod error;
pub mod field;
pub mod functionals;
pub mod harness;
pub mod model;
pub mod path;
pub mod stats;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
