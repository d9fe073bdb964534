use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Graph, Matrix, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        BnState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

/// `gamma * normalize(x) + beta`.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimate (`running = momentum * running + (1 - momentum) * batch`,
/// unbiased variance). Eval mode uses the running estimate and leaves it alone.
pub fn batch_norm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BnState,
    mode: Mode,
) -> Result<Var> {
    let (rows, cols) = g.shape(x);
    if cols != state.features() {
        return Err(Error::Dimension {
            op: "batch_norm",
            lhs: (rows, cols),
            rhs: (1, state.features()),
        });
    }
    let normalized = match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::Config(format!(
                    "batch norm in train mode needs at least 2 rows, got {rows}"
                )));
            }
            let (node, mean, var) = g.standardize_cols(x, state.eps);
            let unbias = rows as f64 / (rows as f64 - 1.0);
            let m = state.momentum;
            for j in 0..cols {
                state.running_mean[j] = m * state.running_mean[j] + (1.0 - m) * mean[j];
                state.running_var[j] = m * state.running_var[j] + (1.0 - m) * var[j] * unbias;
            }
            node
        }
        Mode::Eval => {
            let mean = g.constant(Matrix::row_vector(&state.running_mean));
            let inv: Vec<f64> = state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + state.eps).sqrt())
                .collect();
            let inv = g.constant(Matrix::row_vector(&inv));
            let centered = g.sub(x, mean)?;
            g.mul(centered, inv)?
        }
    };
    let scaled = g.mul(normalized, gamma)?;
    g.add(scaled, beta)
}
