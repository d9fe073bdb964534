//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward pass, so it is independent of
//! every backward rule it is used to verify.

use rand::Rng;

use crate::error::Result;

use super::{Graph, Matrix, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so that near-zero gradients
/// compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the backward-pass gradient of a scalar function of `inputs`
/// against central differences with step `step`, over every input entry.
pub fn check_gradient<F>(inputs: &[Matrix], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| g.grad(v).clone()).collect();

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|m| g.leaf(m.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let original = input.as_slice()[idx];
            work[k].as_mut_slice()[idx] = original + step;
            let plus = eval(&work)?;
            work[k].as_mut_slice()[idx] = original - step;
            let minus = eval(&work)?;
            work[k].as_mut_slice()[idx] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k].as_slice()[idx];
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Matrix with entries uniform in `[-scale, scale)`.
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}
