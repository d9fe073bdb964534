//! Paired source/target open-set datasets.
//!
//! Source samples come from `N` Gaussian blobs. Target samples come from the
//! same blobs pushed through a rotation (first two dimensions) and a
//! translation, plus `K` extra "unknown" blobs that never appear in the
//! source.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    /// Raw class id. Ids `>= n_known` are unknown classes.
    pub label: usize,
    pub domain: Domain,
}

/// Label used for evaluation: raw ids at or above `n_known` collapse to `n_known`.
pub fn eval_label(raw: usize, n_known: usize) -> usize {
    raw.min(n_known)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn eval_labels(&self, n_known: usize) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| eval_label(s.label, n_known))
            .collect()
    }

    /// Feature rows for the given indices, in order.
    pub fn features(&self, indices: &[usize]) -> Matrix {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
        }
        Matrix::from_vec(indices.len(), dim, data).expect("uniform dimension")
    }

    pub fn all_features(&self) -> Matrix {
        let all: Vec<usize> = (0..self.len()).collect();
        self.features(&all)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_known: usize,
    pub n_unknown_subclasses: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Rotation of the target in the plane of the first two dimensions, radians.
    pub shift_rotation: f64,
    /// Target translation; empty means zero.
    pub shift_translation: Vec<f64>,
    pub noise_sigma: f64,
    /// Fraction of target samples drawn from unknown classes.
    pub unknown_ratio: f64,
    /// Radius of the circle (first two dimensions) holding the known class means.
    pub class_radius: f64,
    /// Half-width of the box unknown means are drawn from.
    pub unknown_spread: f64,
    /// Minimum distance between an unknown mean and every known mean;
    /// defaults to `3 * noise_sigma`.
    pub guard_radius: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_known: 4,
            n_unknown_subclasses: 2,
            dim: 8,
            samples_per_class: 200,
            shift_rotation: 0.5,
            shift_translation: vec![0.5, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            noise_sigma: 1.0,
            unknown_ratio: 0.5,
            class_radius: 4.0,
            unknown_spread: 4.0,
            guard_radius: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_known < 2 {
            return Err(Error::validation("n_known", "must be at least 2"));
        }
        if self.n_unknown_subclasses < 1 {
            return Err(Error::validation("n_unknown_subclasses", "must be at least 1"));
        }
        if self.dim < 2 {
            return Err(Error::validation("dim", "must be at least 2"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::validation("samples_per_class", "must be positive"));
        }
        if !(self.unknown_ratio > 0.0 && self.unknown_ratio < 1.0) {
            return Err(Error::validation(
                "unknown_ratio",
                format!("must lie in (0, 1), got {}", self.unknown_ratio),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::validation("noise_sigma", "must be finite and nonnegative"));
        }
        if !self.shift_translation.is_empty() && self.shift_translation.len() != self.dim {
            return Err(Error::validation(
                "shift_translation",
                format!(
                    "has {} entries but dim is {}",
                    self.shift_translation.len(),
                    self.dim
                ),
            ));
        }
        for (name, v) in [
            ("shift_rotation", self.shift_rotation),
            ("class_radius", self.class_radius),
            ("unknown_spread", self.unknown_spread),
        ] {
            if !v.is_finite() {
                return Err(Error::validation(name, "must be finite"));
            }
        }
        if let Some(g) = self.guard_radius {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::validation("guard_radius", "must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn guard(&self) -> f64 {
        self.guard_radius.unwrap_or(3.0 * self.noise_sigma)
    }

    /// Number of unknown target samples so that they make up `unknown_ratio`
    /// of the whole target set.
    pub fn unknown_count(&self) -> usize {
        let known = (self.n_known * self.samples_per_class) as f64;
        (self.unknown_ratio * known / (1.0 - self.unknown_ratio)).round() as usize
    }

    fn translation(&self) -> Vec<f64> {
        if self.shift_translation.is_empty() {
            vec![0.0; self.dim]
        } else {
            self.shift_translation.clone()
        }
    }

    /// Applies the source→target shift to a point.
    pub fn shift(&self, x: &[f64]) -> Vec<f64> {
        let (s, c) = self.shift_rotation.sin_cos();
        let mut out = x.to_vec();
        out[0] = c * x[0] - s * x[1];
        out[1] = s * x[0] + c * x[1];
        for (o, t) in out.iter_mut().zip(self.translation()) {
            *o += t;
        }
        out
    }

    pub fn known_means(&self) -> Vec<Vec<f64>> {
        (0..self.n_known)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / self.n_known as f64;
                let mut m = vec![0.0; self.dim];
                m[0] = self.class_radius * angle.cos();
                m[1] = self.class_radius * angle.sin();
                m
            })
            .collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn sample_blob(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            m + sigma * z
        })
        .collect()
}

/// Draws the source and target datasets. Pure function of `config`.
pub fn generate_pair(config: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let known = config.known_means();
    let shifted: Vec<Vec<f64>> = known.iter().map(|m| config.shift(m)).collect();

    let guard = config.guard();
    let mut unknown_means = Vec::with_capacity(config.n_unknown_subclasses);
    for j in 0..config.n_unknown_subclasses {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let candidate: Vec<f64> = (0..config.dim)
                .map(|_| rng.random_range(-1.0..=1.0) * config.unknown_spread)
                .collect();
            let clear = known
                .iter()
                .chain(&shifted)
                .all(|m| distance(m, &candidate) >= guard);
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(m) => unknown_means.push(m),
            None => {
                return Err(Error::Generation(format!(
                    "could not place unknown class {j} outside guard radius {guard} \
                     after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )))
            }
        }
    }

    let sigma = config.noise_sigma;
    let mut source = Vec::with_capacity(config.n_known * config.samples_per_class);
    for (k, mean) in known.iter().enumerate() {
        for _ in 0..config.samples_per_class {
            source.push(LabeledSample {
                features: sample_blob(&mut rng, mean, sigma),
                label: k,
                domain: Domain::Source,
            });
        }
    }

    let mut target = Vec::new();
    for (k, mean) in known.iter().enumerate() {
        for _ in 0..config.samples_per_class {
            let x = sample_blob(&mut rng, mean, sigma);
            target.push(LabeledSample {
                features: config.shift(&x),
                label: k,
                domain: Domain::Target,
            });
        }
    }
    let n_unknown = config.unknown_count();
    let k = config.n_unknown_subclasses;
    for (j, mean) in unknown_means.iter().enumerate() {
        let count = n_unknown / k + usize::from(j < n_unknown % k);
        for _ in 0..count {
            target.push(LabeledSample {
                features: sample_blob(&mut rng, mean, sigma),
                label: config.n_known + j,
                domain: Domain::Target,
            });
        }
    }
    Ok((Dataset::new(source), Dataset::new(target)))
}

/// Formats like C's `%.17g`.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    if !(-4..17).contains(&exp) {
        let mut m = format!("{}.{}", &digits[..1], &digits[1..]);
        strip_fraction_zeros(&mut m);
        let esign = if exp < 0 { '-' } else { '+' };
        return format!("{sign}{m}e{esign}{:02}", exp.abs());
    }
    let mut fixed = if exp >= 0 {
        let split = exp as usize + 1;
        format!("{}.{}", &digits[..split], &digits[split..])
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    strip_fraction_zeros(&mut fixed);
    format!("{sign}{fixed}")
}

fn strip_fraction_zeros(s: &mut String) {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
}

/// Writes `domain,label,f0,...,f{d-1}` rows.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv(dataset, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_csv(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    let dim = dataset.dim();
    let mut header = String::from("domain,label");
    for j in 0..dim {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}")?;
    for s in &dataset.samples {
        write!(out, "{},{}", s.domain.as_str(), s.label)?;
        for &v in &s.features {
            write!(out, ",{}", format_g17(v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Schema(format!("{}: file is empty", path.display())));
    }
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(Error::Schema(format!(
            "{}: header must be `domain,label,f0,...`",
            path.display()
        )));
    }
    let dim = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Schema(format!(
                "{}: expected column `f{j}`, found `{name}`",
                path.display()
            )));
        }
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 2 {
            return Err(Error::Schema(format!(
                "{}: line {line} has {} feature columns, header declares {dim}",
                path.display(),
                record.len().saturating_sub(2)
            )));
        }
        let domain: Domain = record[0]
            .parse()
            .map_err(|reason| Error::Parse { line, reason })?;
        let label: usize = record[1].parse().map_err(|_| Error::Parse {
            line,
            reason: format!("label `{}` is not a nonnegative integer", &record[1]),
        })?;
        let mut features = Vec::with_capacity(dim);
        for field in record.iter().skip(2) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                reason: format!("feature `{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    reason: format!("feature `{field}` is not finite"),
                });
            }
            features.push(v);
        }
        samples.push(LabeledSample {
            features,
            label,
            domain,
        });
    }
    if samples.is_empty() {
        return Err(Error::Schema(format!("{}: no samples", path.display())));
    }
    Ok(Dataset::new(samples))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; a trailing batch with fewer than two samples is dropped.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2 for batch norm, got {batch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
