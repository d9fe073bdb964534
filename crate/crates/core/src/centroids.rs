//! Global per-class centroids for both domains, maintained with
//! cosine-reweighted moving averages of mini-batch centroids.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::NetworkParams;

/// Norm below which a vector carries no direction.
pub const MIN_NORM: f64 = 1e-12;

/// `(cos(u, v) + 1) / 2`, or `0.5` when either vector is (numerically) zero.
pub fn rho(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < MIN_NORM || nv < MIN_NORM {
        log::debug!("rho of a zero-norm vector treated as 0.5");
        return 0.5;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    ((dot / (nu * nv)).clamp(-1.0, 1.0) + 1.0) / 2.0
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Per-class mean of the rows of `features` whose label is `k`, for
/// `k < n_classes`. Rows with other labels are ignored; classes without
/// members give `None`.
pub fn class_means(features: &Matrix, labels: &[usize], n_classes: usize) -> Vec<Option<Vec<f64>>> {
    let dim = features.cols();
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y < n_classes {
            counts[y] += 1;
            for (s, x) in sums[y].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Mixing weights used by one [`CentroidBank::update`]; `None` for classes
/// absent from the mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateWeights {
    pub source: Vec<Option<f64>>,
    pub target: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    /// One centroid per known class, source domain.
    pub source: Vec<Vec<f64>>,
    /// One centroid per known class, target domain (from pseudo-labels).
    pub target: Vec<Vec<f64>>,
    pub iteration: u64,
}

impl CentroidBank {
    pub fn n_known(&self) -> usize {
        self.source.len()
    }

    pub fn dim(&self) -> usize {
        self.source.first().map_or(0, Vec::len)
    }

    /// Global centroids from full-dataset features. Target classes that no
    /// sample is pseudo-labelled as fall back to the source centroid.
    pub fn from_features(
        source_features: &Matrix,
        source_labels: &[usize],
        target_features: &Matrix,
        target_pseudo: &[usize],
        n_known: usize,
    ) -> Result<Self> {
        let source: Vec<Vec<f64>> = class_means(source_features, source_labels, n_known)
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                c.ok_or_else(|| Error::Contract(format!("source has no samples of class {k}")))
            })
            .collect::<Result<_>>()?;
        let target = class_means(target_features, target_pseudo, n_known)
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                c.unwrap_or_else(|| {
                    log::warn!("no target sample predicted as class {k}; using source centroid");
                    source[k].clone()
                })
            })
            .collect();
        Ok(CentroidBank {
            source,
            target,
            iteration: 0,
        })
    }

    /// Runs the network in eval mode over both datasets and averages features
    /// per (pseudo-)class.
    pub fn init(net: &NetworkParams, source: &Dataset, target: &Dataset) -> Result<Self> {
        let (fs, _) = net.infer(&source.all_features())?;
        let (ft, logits) = net.infer(&target.all_features())?;
        let pseudo = logits.argmax_rows();
        CentroidBank::from_features(&fs, &source.labels(), &ft, &pseudo, net.n_known)
    }

    /// Folds mini-batch centroids into the global ones:
    /// `c_s ← ρ_s a_s + (1 − ρ_s) c_s` with `ρ_s = rho(a_s, c_s)`, and
    /// `c_t ← ρ_t a_t + (1 − ρ_t) c_t` with `ρ_t = rho(a_t, c_s)` against the
    /// previous source centroid. Classes missing from the batch are untouched.
    pub fn update(
        &mut self,
        local_source: &[Option<Vec<f64>>],
        local_target: &[Option<Vec<f64>>],
    ) -> UpdateWeights {
        self.update_with(local_source, local_target, rho)
    }

    /// [`update`](Self::update) with a caller-supplied weight function.
    pub fn update_with(
        &mut self,
        local_source: &[Option<Vec<f64>>],
        local_target: &[Option<Vec<f64>>],
        weight: impl Fn(&[f64], &[f64]) -> f64,
    ) -> UpdateWeights {
        let n = self.n_known();
        let mut weights = UpdateWeights {
            source: vec![None; n],
            target: vec![None; n],
        };
        for k in 0..n {
            let previous_source = self.source[k].clone();
            if let Some(a) = &local_source[k] {
                let r = weight(a, &previous_source);
                mix(&mut self.source[k], a, r);
                weights.source[k] = Some(r);
            }
            if let Some(a) = &local_target[k] {
                let r = weight(a, &previous_source);
                mix(&mut self.target[k], a, r);
                weights.target[k] = Some(r);
            }
        }
        self.iteration += 1;
        weights
    }

    /// `‖c_s^k − c_t^k‖` per class.
    pub fn gaps(&self) -> Vec<f64> {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, t)| distance(s, t))
            .collect()
    }

    pub fn source_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.source).expect("uniform dimension")
    }

    pub fn target_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.target).expect("uniform dimension")
    }
}

fn mix(centroid: &mut [f64], local: &[f64], r: f64) {
    for (c, a) in centroid.iter_mut().zip(local) {
        *c = r * a + (1.0 - r) * *c;
    }
}
