//! Tabular laboratory for λ-weighted offline RL.
//!
//! A small target dataset and an exactly-known source domain are combined
//! through a convex weight λ on their TD errors. This crate provides:
//!
//! - [`mdp`]: finite MDPs, exact Bellman operators, optimal Q-functions.
//! - [`data`]: source-domain construction, i.i.d. transition sampling,
//!   coverage and distribution-ratio bounds.
//! - [`solver`]: the per-cell closed-form weighted update, a brute-force
//!   minimizer used as an oracle, TD-error evaluators and the iteration driver.
//! - [`bounds`]: dynamics gap, normalized variance, the expected,
//!   worst-case and convergence bounds, and optimal weights.
//! - [`harness`]: Monte-Carlo validation of the bounds and λ sweeps.

// `!(x > 0.0)` is used on purpose: NaN must fail range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod data;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod seed;
pub mod solver;

pub use bounds::{BoundInputs, ConvergenceInputs, CountsPolicy};
pub use data::{DomainPair, SamplingDistribution, TransitionDataset};
pub use error::{Error, Result};
pub use mdp::{OperatorMode, Policy, QTable, TabularMdp};
pub use solver::{SolveConfig, SolveTrace};
