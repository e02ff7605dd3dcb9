//! Entropic optimal transport by temperature annealing with truncated Newton
//! Bregman projections.
//!
//! The entry point is [`mdot::mdot`]; [`projector::project`] solves a single
//! fixed-temperature dual problem, and [`oracles`] holds reference solvers
//! used in tests.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bellman;
pub mod dual;
pub mod error;
pub mod mdot;
pub mod ops;
pub mod oracles;
pub mod problem;
pub mod projector;
pub mod report;
pub mod tensor;

pub use error::{OtError, Result};
pub use mdot::{mdot, MdotOptions, Solution, SolverKind};
pub use problem::Problem;
