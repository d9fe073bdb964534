//! Reverse-mode differentiation over dense 2-D `f64` matrices.

mod batchnorm;
pub mod gradcheck;
mod graph;
mod matrix;

pub use batchnorm::{batch_norm, BnState, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use graph::{softmax, GradScale, Graph, Var, LOG_EPS};
pub use matrix::Matrix;

#[cfg(test)]
mod tests;
