//! Online feedback optimization for time-varying quadratic programs with
//! heterogeneous (per-coordinate) step sizes.
//!
//! The crate covers the problem model and projections, the regularized
//! saddle operator and its monotonicity checks, gradient estimators driven
//! by plant measurements, projected-gradient and primal-dual iterations
//! with the Γ(x) switching rule, a cosine-similarity step-size adaptation,
//! an exact saddle-point oracle with tracking metrics, and a synthetic
//! DER/VPP network scenario.

pub mod adaptive;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod operators;
pub mod oracle;
pub mod projection;
pub mod qp;
pub mod scenario;
pub mod solvers;

pub use error::{OfoError, Result};
