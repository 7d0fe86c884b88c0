//! Mixed-integer optimal control of switched dynamical systems.
//!
//! The pipeline has three routes to a binary-input solution:
//!
//! * [`relaxed`]: direct multiple shooting with the discrete inputs relaxed
//!   to their convex hull, solved by the in-crate [`nlp`] solver;
//! * [`cia`]: projection of a relaxed control onto binary values by sum-up
//!   rounding or by branch and bound on the accumulated deviation under
//!   minimum-uptime constraints;
//! * [`sto`] + [`seqopt`]: switching time optimization on a fixed stage
//!   sequence through a time transformation, driven by an iterative
//!   sequence optimization that removes redundant stages.
//!
//! [`model`] holds the problem abstraction and the Double Tank reference
//! instance.

pub mod cia;
pub mod error;
pub mod exec;
pub mod model;
pub mod nlp;
pub mod relaxed;
pub mod seqopt;
pub mod sto;

pub use error::{Error, Result};
pub use exec::Execution;
