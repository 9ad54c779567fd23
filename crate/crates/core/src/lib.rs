//! Ergodic theory of capacities and upper probabilities, made checkable.
//!
//! Two regimes are computed exactly (or to a declared float tolerance):
//! finite ground sets with arbitrary endomaps, and piecewise-affine maps on
//! a circle segment `[0, c)`. On top of them sit the convergence checks
//! ([`ergocheck`]) and the matrix-cocycle machinery ([`cocycle`]).

pub mod cocycle;
pub mod ergocheck;
mod error;
pub mod finitedyn;
pub mod intervaldyn;
pub mod scalar;
pub mod setfun;

pub use error::{Error, Result};
pub use scalar::{Rational, Scalar};
