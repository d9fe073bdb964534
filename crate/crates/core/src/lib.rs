//! Open-set domain adaptation by adversarial alignment, semantic categorical
//! alignment of class centroids, and margin-based contrastive mapping of
//! unknown target samples.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod centroids;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
