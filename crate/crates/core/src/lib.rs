//! Numerical laboratory for multidimensional backward stochastic
//! differential equations driven by a Brownian motion, a compensated
//! Poisson random measure and an orthogonal martingale:
//!
//! ```text
//! Y_t = ξ + ∫_t^T f(s, Y_s, Z_s, ψ_s) ds − ∫_t^T ∫ ψ_s(u) π̃(du, ds) − ∫_t^T Z_s dW_s − (M_T − M_t)
//! ```
//!
//! Module map:
//!
//! - [`noise`]: seeded path ensembles (Brownian increments, Poisson jump
//!   counts on a finite-atom Lévy measure, Rademacher auxiliary noise).
//! - [`model`]: generators, terminal conditions, sampled hypothesis checks,
//!   the α-shift and the model registry / expression grammar.
//! - [`oracle`]: exact backward induction on a small discrete tree.
//! - [`solver`]: least-squares Monte Carlo backward solver, the Picard map
//!   and its β-norm, and the random-horizon construction.
//! - [`linear`]: Doléans-Dade exponential and linear BSDE representation.
//! - [`calculus`]: Itô formula for `|x|^p`, jump bounds, zero-set identity.
//! - [`analysis`]: solution norms, a priori ratios, stability, comparison.
//! - [`suite`]: the standard acceptance battery.

pub mod analysis;
pub mod calculus;
pub mod error;
pub mod linear;
pub mod model;
pub mod noise;
pub mod oracle;
pub mod solver;
pub mod step;
pub mod suite;

pub use error::{Error, Result};

/// Version of the JSON report schema emitted by the CLI and the suite.
pub const REPORT_SCHEMA_VERSION: &str = "1.0.0";

pub fn report_schema_version() -> &'static str {
    REPORT_SCHEMA_VERSION
}
