//! Loss terms of the adaptation objective, built as graph nodes.
//!
//! Centroids and margins enter every loss as constants. The one exception is
//! the alignment loss, whose live centroids carry the current mini-batch
//! contribution as a differentiable term (see [`live_centroids`]).

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradScale, Graph, Matrix, Var};
use crate::centroids::{distance, squared_distance, CentroidBank, MIN_NORM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the source contrastive-center loss.
    pub lambda_s: f64,
    /// Weight of the cross-domain centroid alignment loss.
    pub lambda_c: f64,
    /// Weight of the contrastive mapping loss on target samples.
    pub lambda_t: f64,
    /// Exponent on the cosine reweighting inside the contrastive mapping loss.
    pub omega: f64,
    /// Denominator guard of the contrastive-center loss.
    pub delta: f64,
    /// Gradient-reversal multiplier between G and D for the adversarial term.
    pub adv_lambda: f64,
    /// Use squared distances where the mapping loss squares a distance again
    /// (quartic energies, margins in squared units).
    pub literal_dist: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 0.02,
            lambda_c: 0.005,
            lambda_t: 1e-4,
            omega: 0.5,
            delta: 1e-6,
            adv_lambda: 1.0,
            literal_dist: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_c", self.lambda_c),
            ("lambda_t", self.lambda_t),
            ("omega", self.omega),
            ("adv_lambda", self.adv_lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(name, "must be finite and nonnegative"));
            }
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::validation("delta", "must be positive"));
        }
        Ok(())
    }
}

/// Per-known-class repulsion radius for unknown target samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginVector(pub Vec<f64>);

impl MarginVector {
    pub fn constant(value: f64, n_known: usize) -> Self {
        MarginVector(vec![value; n_known])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        m[(i, y)] = 1.0;
    }
    m
}

/// Mean cross-entropy of `logits` (batch × (N+1)) against known-class labels.
pub fn cls_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = g.shape(logits);
    if labels.len() != rows {
        return Err(Error::Contract(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    let n_known = classes - 1;
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_known) {
        return Err(Error::Contract(format!(
            "source label {bad} is not a known class (N = {n_known})"
        )));
    }
    let log_p = g.log_softmax_rows(logits);
    let mask = g.constant(one_hot(labels, classes));
    let picked = g.mul(log_p, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / rows as f64))
}

const PROB_EPS: f64 = 1e-12;

/// Softmax probability of the unknown class (last column), as a column vector.
pub fn unknown_probability(g: &mut Graph, logits: Var) -> Result<Var> {
    let classes = g.shape(logits).1;
    let probs = g.softmax_rows(logits);
    let mut selector = Matrix::zeros(classes, 1);
    selector[(classes - 1, 0)] = 1.0;
    let sel = g.constant(selector);
    g.matmul(probs, sel)
}

/// Mean over the batch of `-½ log p - ½ log(1 - p)` with `p` the unknown-class
/// probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn adv_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let p = unknown_probability(g, logits)?;
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let neg = g.scale(p, -1.0);
    let q = g.shift(neg, 1.0);
    let log_p = g.log(p);
    let log_q = g.log(q);
    let both = g.add(log_p, log_q)?;
    let mean = g.mean(both);
    Ok(g.scale(mean, -0.5))
}

#[derive(Debug, Clone, Copy)]
pub struct AdaTerms {
    pub cls: Var,
    pub adv: Var,
    /// `cls + adv`
    pub objective: Var,
    /// Discriminator output on the reversed target features.
    pub target_logits: Var,
}

/// Classification on source plus the adversarial term on target features
/// routed to the discriminator through a gradient-reversal node. One backward
/// pass makes D descend on the adversarial loss while G ascends on it.
pub fn ada_objective<D>(
    g: &mut Graph,
    source_logits: Var,
    source_labels: &[usize],
    target_features: Var,
    adv_lambda: GradScale,
    mut discriminate: D,
) -> Result<AdaTerms>
where
    D: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let cls = cls_loss(g, source_logits, source_labels)?;
    let reversed = g.grad_reverse(target_features, adv_lambda);
    let target_logits = discriminate(g, reversed)?;
    let adv = adv_loss(g, target_logits)?;
    let objective = g.add(cls, adv)?;
    Ok(AdaTerms {
        cls,
        adv,
        objective,
        target_logits,
    })
}

/// Squared distances from every row of `x` to every row of `centroids`, as
/// a batch × N matrix node. Centroids are constants.
fn squared_distances(g: &mut Graph, x: Var, centroids: &Matrix) -> Result<Var> {
    let columns = (0..centroids.rows())
        .map(|k| {
            let c = g.constant(Matrix::row_vector(centroids.row(k)));
            let diff = g.sub(x, c)?;
            let sq = g.square(diff);
            Ok(g.sum_rows(sq))
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&columns)
}

/// Source contrastive-center loss:
/// `(1/2m) Σ_i ‖x_i − c^{y_i}‖² / (Σ_{j≠y_i} ‖x_i − c^j‖² + δ)`.
pub fn contrastive_center_loss(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    centroids: &Matrix,
    delta: f64,
) -> Result<Var> {
    let n_known = centroids.rows();
    if n_known < 2 {
        return Err(Error::Contract(
            "contrastive-center loss needs at least two known classes".into(),
        ));
    }
    let (rows, cols) = g.shape(features);
    if cols != centroids.cols() || labels.len() != rows {
        return Err(Error::Dimension {
            op: "contrastive_center_loss",
            lhs: (rows, cols),
            rhs: centroids.shape(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_known) {
        return Err(Error::Contract(format!("label {bad} has no centroid")));
    }
    let dists = squared_distances(g, features, centroids)?;
    let own = one_hot(labels, n_known);
    let other = own.map(|v| 1.0 - v);
    let own = g.constant(own);
    let other = g.constant(other);
    let own_d = g.mul(dists, own)?;
    let numerator = g.sum_rows(own_d);
    let other_d = g.mul(dists, other)?;
    let other_sum = g.sum_rows(other_d);
    let denominator = g.shift(other_sum, delta);
    let ratio = g.div(numerator, denominator)?;
    let total = g.sum(ratio);
    Ok(g.scale(total, 0.5 / rows as f64))
}

/// Centroids after this iteration's moving-average step, as a node in which
/// the mini-batch means are differentiable and the history is constant:
/// `c_k = ρ_k · mean_{i: y_i = k} x_i + (1 − ρ_k) · previous_k`.
/// Classes with `weights[k] == None` keep `previous_k`.
pub fn live_centroids(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    weights: &[Option<f64>],
    previous: &Matrix,
) -> Result<Var> {
    let rows = g.shape(features).0;
    let n = previous.rows();
    let mut counts = vec![0usize; n];
    for &y in labels {
        if y < n {
            counts[y] += 1;
        }
    }
    let mut averaging = Matrix::zeros(n, rows);
    let mut history = previous.clone();
    for k in 0..n {
        if let (Some(r), true) = (weights[k], counts[k] > 0) {
            for (i, &y) in labels.iter().enumerate() {
                if y == k {
                    averaging[(k, i)] = r / counts[k] as f64;
                }
            }
            history.row_mut(k).iter_mut().for_each(|c| *c *= 1.0 - r);
        }
    }
    let averaging = g.constant(averaging);
    let current = g.matmul(averaging, features)?;
    let history = g.constant(history);
    g.add(current, history)
}

/// `Σ_k ‖c_s^k − c_t^k‖²` over two N × f centroid nodes.
pub fn cca_loss(g: &mut Graph, source: Var, target: Var) -> Result<Var> {
    let diff = g.sub(source, target)?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

/// Plain-value alignment loss of a bank.
pub fn cca_value(bank: &CentroidBank) -> f64 {
    bank.source
        .iter()
        .zip(&bank.target)
        .map(|(s, t)| squared_distance(s, t))
        .sum()
}

/// `M^k = (1/N) Σ_{j≠k} dist(c_t^j, c_s^k)` with Euclidean `dist`, or squared
/// Euclidean when `literal_dist` is set.
pub fn adaptive_margins(bank: &CentroidBank, literal_dist: bool) -> MarginVector {
    let n = bank.n_known();
    let dist = |a: &[f64], b: &[f64]| {
        if literal_dist {
            squared_distance(a, b)
        } else {
            distance(a, b)
        }
    };
    MarginVector(
        (0..n)
            .map(|k| {
                (0..n)
                    .filter(|&j| j != k)
                    .map(|j| dist(&bank.target[j], &bank.source[k]))
                    .sum::<f64>()
                    / n as f64
            })
            .collect(),
    )
}

/// Row-wise `(cos(x_i, c_i) + 1) / 2` as a column node. `c` is a constant with
/// one row per row of `x` or a single row shared by all. Rows where either
/// vector has norm below [`MIN_NORM`] get exactly `0.5`.
pub fn rho_rows(g: &mut Graph, x: Var, c: &Matrix) -> Result<Var> {
    let rows = g.shape(x).0;
    let c_norms: Vec<f64> = (0..c.rows())
        .map(|i| c.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let x_norms: Vec<f64> = {
        let xv = g.value(x);
        (0..rows)
            .map(|i| xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };
    let c_norm_at = |i: usize| if c.rows() == 1 { c_norms[0] } else { c_norms[i] };
    let keep: Vec<f64> = (0..rows)
        .map(|i| {
            if x_norms[i] < MIN_NORM || c_norm_at(i) < MIN_NORM {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    let inv_c: Vec<f64> = (0..rows).map(|i| 1.0 / c_norm_at(i).max(MIN_NORM)).collect();

    let cv = g.constant(c.clone());
    let prod = g.mul(x, cv)?;
    let dot = g.sum_rows(prod);
    let sq = g.square(x);
    let sq_sum = g.sum_rows(sq);
    let x_norm = g.sqrt(sq_sum);
    let x_norm = g.clamp(x_norm, MIN_NORM, f64::INFINITY);
    let cos = g.div(dot, x_norm)?;
    let inv_c = g.constant(Matrix::column_vector(&inv_c));
    let cos = g.mul(cos, inv_c)?;
    let keep = g.constant(Matrix::column_vector(&keep));
    let cos = g.mul(cos, keep)?;
    let cos = g.clamp(cos, -1.0, 1.0);
    let half = g.scale(cos, 0.5);
    Ok(g.shift(half, 0.5))
}

/// Reliable target samples split by predicted kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReliableSplit {
    /// `(row, predicted known class)`
    pub known: Vec<(usize, usize)>,
    pub unknown: Vec<usize>,
}

impl ReliableSplit {
    pub fn new(pseudo: &[usize], reliable: &[bool], n_known: usize) -> Self {
        let mut split = ReliableSplit::default();
        for (i, (&y, &ok)) in pseudo.iter().zip(reliable).enumerate() {
            if !ok {
                continue;
            }
            if y < n_known {
                split.known.push((i, y));
            } else {
                split.unknown.push(i);
            }
        }
        split
    }

    pub fn len(&self) -> usize {
        self.known.len() + self.unknown.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Options of the contrastive mapping loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScmParams {
    pub omega: f64,
    pub literal_dist: bool,
}

/// Contrastive mapping loss over reliable target samples, averaged over them.
///
/// A sample predicted as known class `k` contributes
/// `(1 − ρ)^ω · d(x, c_s^k)²`; a sample predicted unknown contributes
/// `(1/N) Σ_k ρ_k^ω · max(0, M^k − d(x, c_s^k))²`, where `ρ` is the cosine
/// weight between the sample and the source centroid. With no reliable
/// samples the loss is the constant zero.
pub fn scm_loss(
    g: &mut Graph,
    features: Var,
    pseudo: &[usize],
    reliable: &[bool],
    source_centroids: &Matrix,
    margins: &MarginVector,
    params: ScmParams,
) -> Result<Var> {
    let n_known = source_centroids.rows();
    let rows = g.shape(features).0;
    if pseudo.len() != rows || reliable.len() != rows {
        return Err(Error::Contract(format!(
            "{} pseudo-labels and {} reliability flags for {rows} rows",
            pseudo.len(),
            reliable.len()
        )));
    }
    if margins.0.len() != n_known {
        return Err(Error::Contract(format!(
            "{} margins for {n_known} classes",
            margins.0.len()
        )));
    }
    let split = ReliableSplit::new(pseudo, reliable, n_known);
    if split.is_empty() {
        log::debug!("no reliable target samples; contrastive mapping skipped");
        return Ok(g.scalar(0.0));
    }
    let mut parts = Vec::new();

    if !split.known.is_empty() {
        let idx: Vec<usize> = split.known.iter().map(|&(i, _)| i).collect();
        let cls: Vec<usize> = split.known.iter().map(|&(_, k)| k).collect();
        let x = g.select_rows(features, &idx)?;
        let c = source_centroids.select_rows(&cls);
        let cv = g.constant(c.clone());
        let diff = g.sub(x, cv)?;
        let sq = g.square(diff);
        let d2 = g.sum_rows(sq);
        let energy = if params.literal_dist { g.square(d2) } else { d2 };
        let r = rho_rows(g, x, &c)?;
        let neg = g.scale(r, -1.0);
        let one_minus = g.shift(neg, 1.0);
        let one_minus = g.clamp(one_minus, 0.0, 1.0);
        let w = g.powf(one_minus, params.omega);
        let weighted = g.mul(w, energy)?;
        parts.push(g.sum(weighted));
    }

    if !split.unknown.is_empty() {
        let x = g.select_rows(features, &split.unknown)?;
        let mut per_class = Vec::with_capacity(n_known);
        for k in 0..n_known {
            let c = Matrix::row_vector(source_centroids.row(k));
            let cv = g.constant(c.clone());
            let diff = g.sub(x, cv)?;
            let sq = g.square(diff);
            let d2 = g.sum_rows(sq);
            let d = if params.literal_dist { d2 } else { g.sqrt(d2) };
            let neg = g.scale(d, -1.0);
            let gap = g.shift(neg, margins.0[k]);
            let hinge = g.relu(gap);
            let hinge_sq = g.square(hinge);
            let r = rho_rows(g, x, &c)?;
            let r = g.clamp(r, 0.0, 1.0);
            let w = g.powf(r, params.omega);
            let weighted = g.mul(w, hinge_sq)?;
            per_class.push(g.sum(weighted));
        }
        let mut acc = per_class[0];
        for &p in &per_class[1..] {
            acc = g.add(acc, p)?;
        }
        parts.push(g.scale(acc, 1.0 / n_known as f64));
    }

    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(g.scale(total, 1.0 / split.len() as f64))
}

/// Individual terms feeding the total objective. Absent optional terms are
/// treated as switched off.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub adv: Var,
    pub cct: Option<Var>,
    pub cca: Option<Var>,
    pub con: Option<Var>,
}

/// `L_cls + L_adv + λ_s L_cct + λ_c L_cca + λ_t L_con`. Terms with a zero
/// weight are left out of the graph entirely.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut total = g.add(terms.cls, terms.adv)?;
    for (term, weight) in [
        (terms.cct, weights.lambda_s),
        (terms.cca, weights.lambda_c),
        (terms.con, weights.lambda_t),
    ] {
        if let Some(t) = term {
            if weight != 0.0 {
                let scaled = g.scale(t, weight);
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}
