//! Scenario-tree numerics for backward stochastic differential equations under
//! volatility uncertainty (sublinear expectation).
//!
//! The crate is organized bottom-up:
//! - [`gcore`]: volatility sets, the sublinear function G, assumption checks.
//! - [`extspace`]: the extended-space construction absorbing linear drift
//!   coefficients into auxiliary coordinates.
//! - [`lattice`]: controlled scenario trees, upper/conditional expectations,
//!   stochastic exponentials and the two Girsanov evaluation modes.
//! - [`linearize`]: pathwise linearization of quadratic generators.
//! - [`bsde`]: finite- and infinite-horizon solvers plus comparison and bound
//!   harnesses.
//! - [`config`]: the TOML experiment schema shared with the CLI.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`);
//! concrete `f64` aliases are exported below.

pub mod error;
pub mod expr;
pub mod scalar;

pub mod bsde;
pub mod config;
pub mod extspace;
pub mod gcore;
pub mod lattice;
pub mod linearize;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default `f64` volatility set.
pub type VolatilitySet = gcore::VolatilitySet<f64>;
/// Default `f64` generator specification.
pub type GeneratorSpec = gcore::GeneratorSpec<f64>;
/// Default `f64` quadratic-variation bounds.
pub type SigmaBars = gcore::SigmaBars<f64>;
/// Default `f64` time grid.
pub type TimeGrid = lattice::TimeGrid<f64>;
/// Default `f64` scenario tree.
pub type ScenarioTree = lattice::ScenarioTree<f64>;
/// Default `f64` node state.
pub type NodeState = lattice::NodeState<f64>;
/// Default `f64` solver output.
pub type BsdeSolution = bsde::BsdeSolution<f64>;
/// Default `f64` horizon-truncation result.
pub type InfiniteHorizonResult = bsde::InfiniteHorizonResult<f64>;
