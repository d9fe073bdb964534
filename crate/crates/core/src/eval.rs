//! Open-set evaluation: per-class accuracies over the known classes plus the
//! unknown class, and embedding dumps for external plotting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::{format_g17, Dataset};
use crate::error::{Error, Result};
use crate::model::NetworkParams;

/// Accuracies in percent. Classes without ground-truth members have a `None`
/// entry in `per_class` and are left out of every mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub os: f64,
    pub os_star: f64,
    pub all: f64,
    pub unk: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][prediction]`, last index is the unknown class.
    pub confusion: Vec<Vec<u64>>,
    pub epoch: Option<usize>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

impl MetricsRecord {
    /// Metrics of a square `(N+1) × (N+1)` confusion matrix.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, epoch: Option<usize>) -> Result<Self> {
        let classes = confusion.len();
        if classes < 2 || confusion.iter().any(|r| r.len() != classes) {
            return Err(Error::Contract(format!(
                "confusion matrix must be square with at least two classes, got {classes} rows"
            )));
        }
        let n_known = classes - 1;
        let totals: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let grand: u64 = totals.iter().sum();
        if grand == 0 {
            return Err(Error::Contract("no samples to evaluate".into()));
        }
        let per_class: Vec<Option<f64>> = (0..classes)
            .map(|k| {
                if totals[k] == 0 {
                    log::warn!("class {k} has no samples; excluded from the averages");
                    None
                } else {
                    Some(100.0 * confusion[k][k] as f64 / totals[k] as f64)
                }
            })
            .collect();
        let known: Vec<f64> = per_class[..n_known].iter().flatten().copied().collect();
        if known.is_empty() {
            return Err(Error::Contract("no samples of any known class".into()));
        }
        let os_star = known.iter().sum::<f64>() / known.len() as f64;
        let unk = per_class[n_known];
        let os = match unk {
            Some(u) => (known.len() as f64 * os_star + u) / (known.len() + 1) as f64,
            None => os_star,
        };
        let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
        Ok(MetricsRecord {
            os,
            os_star,
            all: 100.0 * correct as f64 / grand as f64,
            unk,
            per_class,
            confusion,
            epoch,
        })
    }

    pub fn n_known(&self) -> usize {
        self.per_class.len() - 1
    }
}

/// Eval-mode features and argmax predictions over `N + 1` classes.
pub fn predict(net: &NetworkParams, data: &Dataset) -> Result<(Matrix, Vec<usize>)> {
    if data.dim() != net.input_dim() {
        return Err(Error::Schema(format!(
            "data has {} features, model expects {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let (features, logits) = net.infer(&data.all_features())?;
    Ok((features, logits.argmax_rows()))
}

/// Metrics of `net` on a target set whose raw labels collapse to `N` beyond
/// the known classes.
pub fn evaluate(net: &NetworkParams, target: &Dataset, epoch: Option<usize>) -> Result<MetricsRecord> {
    if target.is_empty() {
        return Err(Error::Contract("empty target set".into()));
    }
    let (_, predicted) = predict(net, target)?;
    let truth = target.eval_labels(net.n_known);
    MetricsRecord::from_confusion(confusion_matrix(&truth, &predicted, net.n_classes()), epoch)
}

/// Writes `domain,true_label,eval_label,pseudo_label,f0..` rows for every
/// source then target sample.
pub fn dump_embeddings(
    net: &NetworkParams,
    source: &Dataset,
    target: &Dataset,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let width = net.feature_dim();
    let mut write = || -> std::io::Result<()> {
        write!(out, "domain,true_label,eval_label,pseudo_label")?;
        for j in 0..width {
            write!(out, ",f{j}")?;
        }
        writeln!(out)?;
        Ok(())
    };
    write().map_err(|e| Error::io(path, e))?;
    for data in [source, target] {
        if data.is_empty() {
            continue;
        }
        let (features, predicted) = predict(net, data)?;
        for (i, s) in data.samples.iter().enumerate() {
            let mut line = format!(
                "{},{},{},{}",
                s.domain.as_str(),
                s.label,
                crate::data::eval_label(s.label, net.n_known),
                predicted[i]
            );
            for &v in features.row(i) {
                line.push(',');
                line.push_str(&format_g17(v));
            }
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}
