//! Conditional transformation models.
//!
//! The distribution of a continuous response given covariates is written as
//! `P(Y ≤ y | x) = F(h(y | x))` for a fixed link distribution `F` and a
//! transformation `h` that is monotone in `y`. This crate builds the bases
//! for `h`, evaluates the weighted log-likelihood with analytic derivatives,
//! estimates parameters under monotonicity constraints, derives
//! distribution functionals, and grows transformation trees and forests.

pub mod basis;
pub mod data;
pub mod model;
pub mod fit;
pub mod predict;
pub mod formula;
pub mod tree;
pub mod forest;
pub mod simulate;
