//! Numerical laboratory for Itô equations whose drift and diffusion gradient
//! live in Morrey classes.
//!
//! The crate is organised by subsystem:
//!
//! * [`fields`]: coefficient constructions (the three-dimensional example with
//!   a radial singularity, the disjoint-bump counterexample, mollification).
//! * [`morrey`]: ball averages, Morrey norms, mean oscillation, embedding checks.
//! * [`sde`]: Euler–Maruyama simulation, exit/hitting times, derivative flow.
//! * [`estimates`]: statistical pass/fail reports for the quantitative bounds.
//! * [`semigroup`]: finite-difference semigroup, Feynman–Kac, Q-operators and
//!   the chaos-tail criterion.
//! * [`cli`]: the batch experiment driver behind the `morrey-lab` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod estimates;
pub mod fields;
pub mod geom;
pub mod morrey;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod semigroup;
pub mod stats;

pub use error::{Error, Result};

/// Version string stamped into every output row.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
