//! scpkit solves non-convex programming problems with linear equality
//! constraints by sequential convex programming: each iteration minimizes a
//! convex overestimator of the cost subject to convex overestimators of the
//! inequality constraints, all expanded around the previous iterate. When
//! every overestimator matches the underlying function's value and gradient
//! at the expansion point, the iteration is recursively feasible and the
//! true cost never increases.
//!
//! The crate provides:
//!
//! - [`tensor`]: supersymmetric derivative tensors and Taylor containers,
//!   with finite-difference estimation and exact polynomials.
//! - [`convexify`]: constructors for convex overestimators — Taylor-series
//!   convexification, concave-part linearization of difference-of-convex
//!   splits, and Lipschitz-style quadratic regularization.
//! - [`solver`]: a dense primal-dual interior-point method for the convex
//!   subproblems, reporting duals and KKT residuals.
//! - [`scp`]: the outer loop — subproblem construction, adaptive truncation
//!   regularization, the slack-penalty bootstrap, stopping logic, and traces.
//! - [`trajectory`]: a drag-affected point-mass trajectory benchmark with a
//!   thrust bound and a quartic keep-out zone, plus a Monte Carlo harness.
//! - [`verify`]: independent certification oracles (sampling, finite
//!   differences, brute-force grids).

pub mod convexify;
pub mod error;
pub mod scp;
pub mod solver;
pub mod tensor;
pub mod trajectory;
pub mod verify;

pub mod cli;

pub use error::{Error, Result};
