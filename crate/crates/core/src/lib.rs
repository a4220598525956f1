//! Stable generalized finite elements with neural-network enrichments.

// `!(x > 0.0)` is used on purpose to reject NaN; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assembly;
pub mod driver;
pub mod enrichspace;
pub mod error;
pub mod estimator;
pub mod linsolve;
pub mod mesh;
pub mod neuralnet;
pub mod problems;
pub mod quadrature;

pub use error::{NefemError, Result};
