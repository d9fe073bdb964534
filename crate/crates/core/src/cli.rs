//! `osm` command-line interface: dataset generation, training, evaluation
//! and parameter sweeps driven by a JSON run configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centroids::CentroidBank;
use crate::data::{format_g17, generate_pair, load_csv, save_csv, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{dump_embeddings, evaluate, MetricsRecord};
use crate::model::{ArchConfig, ModelSpec, NetworkParams};
use crate::trainer::{train, EpochRecord, TrainConfig, TrainOutput};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SyntheticConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(&self.arch, self.data.dim, self.data.n_known)
    }

    /// Same configuration with data and training seeds set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.data.seed = seed;
        c.train.seed = seed;
        c
    }

    /// SHA-256 of the compact JSON encoding, with `out_dir` left out so the
    /// same experiment hashes equal wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub files: Vec<String>,
}

/// Trained weights and the centroid bank at the end of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub config_hash: String,
    pub net: NetworkParams,
    pub bank: CentroidBank,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Ablation {
    NoSca,
    NoScm,
    AdaOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Omega,
    StaticMargin,
    UnknownRatio,
    Threshold,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::Omega => "omega",
            SweepAxis::StaticMargin => "static_margin",
            SweepAxis::UnknownRatio => "unknown_ratio",
            SweepAxis::Threshold => "threshold",
        }
    }

    fn apply(self, config: &mut RunConfig, value: f64) {
        match self {
            SweepAxis::Omega => config.train.weights.omega = value,
            SweepAxis::StaticMargin => config.train.static_margin = Some(value),
            SweepAxis::UnknownRatio => config.data.unknown_ratio = value,
            SweepAxis::Threshold => config.train.reliability_threshold = Some(value),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "osm", version, about = "Open-set domain adaptation on synthetic benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides shared by commands that read a run configuration.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainFlags {
    /// Switch off a module: semantic categorical alignment, contrastive mapping, or both.
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    /// Constant margin for every class instead of the adaptive one.
    #[arg(long)]
    pub static_margin: Option<f64>,
    /// Exponent of the cosine weight in the mapping loss.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Number of consecutive seeds to run, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Directory holding source.csv and target.csv; generated from the
    /// configuration when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source.csv, target.csv and a manifest.
    Generate {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Pretrain on source, adapt to target, and write checkpoint, metrics,
    /// per-epoch trace and embeddings.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Evaluate a checkpoint on a labelled target CSV.
    Eval {
        /// checkpoint.json written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target CSV with raw labels.
        #[arg(long)]
        target: PathBuf,
        /// Where to write metrics.json; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per (value, seed) and collect final metrics.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Print or check run configurations.
    Config {
        /// Print the default configuration as JSON.
        #[arg(long)]
        print_defaults: bool,
        /// Validate a configuration file and print it with defaults filled in.
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

/// Resolves the configuration file and command-line overrides; flags win.
pub fn resolve_config(overrides: &Overrides, flags: Option<&TrainFlags>) -> Result<RunConfig> {
    let mut config = match &overrides.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &overrides.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = overrides.seed {
        config = config.with_seed(seed);
    }
    if let Some(f) = flags {
        match f.ablate {
            Some(Ablation::NoSca) => config.train.disable_sca = true,
            Some(Ablation::NoScm) => config.train.disable_scm = true,
            Some(Ablation::AdaOnly) => {
                config.train.disable_sca = true;
                config.train.disable_scm = true;
            }
            None => {}
        }
        if let Some(m) = f.static_margin {
            config.train.static_margin = Some(m);
        }
        if let Some(w) = f.omega {
            config.train.weights.omega = w;
        }
        if f.seeds == 0 {
            return Err(Error::validation("seeds", "must be at least 1"));
        }
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn manifest(command: &str, config: &RunConfig, files: &[&str]) -> Manifest {
    Manifest {
        command: command.to_string(),
        config_hash: config.hash(),
        seed: config.train.seed,
        config: config.clone(),
        files: files.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn cmd_generate(config: &RunConfig) -> Result<()> {
    let (source, target) = generate_pair(&config.data)?;
    let dir = &config.out_dir;
    create_dir(dir)?;
    save_csv(&source, &dir.join("source.csv"))?;
    save_csv(&target, &dir.join("target.csv"))?;
    write_json(
        &dir.join("manifest.json"),
        &manifest("generate", config, &["source.csv", "target.csv"]),
    )?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        dir.display()
    );
    Ok(())
}

/// Loads `source.csv` and `target.csv` from `dir` and checks them against
/// the configuration.
pub fn load_pair(dir: &Path, config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let source = load_csv(&dir.join("source.csv"))?;
    let target = load_csv(&dir.join("target.csv"))?;
    for (name, d) in [("source", &source), ("target", &target)] {
        if d.dim() != config.data.dim {
            return Err(Error::Schema(format!(
                "{name} data has {} features, configuration says {}",
                d.dim(),
                config.data.dim
            )));
        }
    }
    if let Some(s) = source.samples.iter().find(|s| s.label >= config.data.n_known) {
        return Err(Error::Schema(format!(
            "source label {} is not one of the {} known classes",
            s.label, config.data.n_known
        )));
    }
    Ok((source, target))
}

/// One complete training run on the given data.
pub fn run_training(config: &RunConfig, source: &Dataset, target: &Dataset) -> Result<TrainOutput> {
    train(&config.train, &config.model_spec(), source, target)
}

fn trace_csv(trace: &[EpochRecord]) -> String {
    let n = trace.first().map_or(0, |r| r.centroid_gaps.len());
    let mut out = String::from(
        "epoch,lr,cls,adv,cct,cca,con,total,reliable_fraction,mean_margin,os,os_star,all,unk",
    );
    for k in 0..n {
        out.push_str(&format!(",gap_{k}"));
    }
    out.push('\n');
    for r in trace {
        let l = &r.losses;
        let mut fields = vec![r.epoch.to_string()];
        fields.extend(
            [
                r.lr,
                l.cls,
                l.adv,
                l.cct,
                l.cca,
                l.con,
                l.total,
                r.reliable_fraction,
                r.mean_margin,
                r.metrics.os,
                r.metrics.os_star,
                r.metrics.all,
            ]
            .iter()
            .map(|&v| format_g17(v)),
        );
        fields.push(r.metrics.unk.map_or(String::new(), format_g17));
        fields.extend(r.centroid_gaps.iter().map(|&v| format_g17(v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Writes checkpoint, metrics, trace, embeddings and manifest into `dir`.
pub fn write_run(
    dir: &Path,
    config: &RunConfig,
    output: &TrainOutput,
    source: &Dataset,
    target: &Dataset,
) -> Result<()> {
    create_dir(dir)?;
    let trace = &output.stage2.trace;
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        epoch: trace.len() - 1,
        config_hash: config.hash(),
        net: output.net.clone(),
        bank: output.stage2.bank.clone(),
    };
    write_json(&dir.join("checkpoint.json"), &checkpoint)?;
    write_json(&dir.join("metrics.json"), output.final_metrics())?;
    let path = dir.join("trace.csv");
    fs::write(&path, trace_csv(trace)).map_err(|e| Error::io(&path, e))?;
    let mut stage1 = String::from("epoch,loss,accuracy\n");
    for r in &output.stage1 {
        stage1.push_str(&format!(
            "{},{},{}\n",
            r.epoch,
            format_g17(r.loss),
            format_g17(r.accuracy)
        ));
    }
    let path = dir.join("stage1.csv");
    fs::write(&path, stage1).map_err(|e| Error::io(&path, e))?;
    dump_embeddings(&output.net, source, target, &dir.join("embeddings.csv"))?;
    write_json(
        &dir.join("manifest.json"),
        &manifest(
            "train",
            config,
            &[
                "checkpoint.json",
                "metrics.json",
                "trace.csv",
                "stage1.csv",
                "embeddings.csv",
            ],
        ),
    )
}

fn summary_line(m: &MetricsRecord) -> String {
    format!(
        "OS {:.1}  OS* {:.1}  ALL {:.1}  UNK {}",
        m.os,
        m.os_star,
        m.all,
        m.unk.map_or("n/a".to_string(), |u| format!("{u:.1}"))
    )
}

fn data_for(config: &RunConfig, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match data_dir {
        Some(d) => load_pair(d, config),
        None => generate_pair(&config.data),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub os: f64,
    pub os_star: f64,
    pub all: f64,
    pub unk: Option<f64>,
    pub runs: Vec<MetricsRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn cmd_train(config: &RunConfig, flags: &TrainFlags) -> Result<()> {
    let first = config.train.seed;
    let seeds: Vec<u64> = (first..first + flags.seeds).collect();
    if seeds.len() == 1 {
        let (source, target) = data_for(config, flags.data.as_deref())?;
        let output = run_training(config, &source, &target)?;
        write_run(&config.out_dir, config, &output, &source, &target)?;
        println!("{}", summary_line(output.final_metrics()));
        return Ok(());
    }
    let mut runs = Vec::new();
    for &seed in &seeds {
        let c = config.with_seed(seed);
        let (source, target) = data_for(&c, flags.data.as_deref())?;
        let output = run_training(&c, &source, &target)?;
        let dir = config.out_dir.join(format!("seed_{seed}"));
        write_run(&dir, &c, &output, &source, &target)?;
        println!("seed {seed}: {}", summary_line(output.final_metrics()));
        runs.push(output.final_metrics().clone());
    }
    let unk: Option<Vec<f64>> = runs.iter().map(|m| m.unk).collect();
    let summary = SeedSummary {
        seeds,
        os: mean(runs.iter().map(|m| m.os)),
        os_star: mean(runs.iter().map(|m| m.os_star)),
        all: mean(runs.iter().map(|m| m.all)),
        unk: unk.map(|u| mean(u.into_iter())),
        runs,
    };
    write_json(&config.out_dir.join("summary.json"), &summary)?;
    println!(
        "mean over {} seeds: OS {:.1}  OS* {:.1}  ALL {:.1}",
        summary.seeds.len(),
        summary.os,
        summary.os_star,
        summary.all
    );
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, target: &Path, out: Option<&Path>) -> Result<MetricsRecord> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = load_csv(target)?;
    let metrics = evaluate(&ckpt.net, &data, Some(ckpt.epoch))?;
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            println!("{}", summary_line(&metrics));
        }
        None => {
            let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
            println!("{text}");
        }
    }
    Ok(metrics)
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub metrics: MetricsRecord,
}

/// Runs every (value, seed) pair; runs are independent and execute in parallel.
pub fn run_sweep(
    config: &RunConfig,
    flags: &TrainFlags,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::validation("values", "sweep needs at least one value"));
    }
    let first = config.train.seed;
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| (first..first + flags.seeds).map(move |s| (v, s)))
        .collect();
    for &(v, _) in &jobs {
        let mut c = config.clone();
        axis.apply(&mut c, v);
        c.validate()?;
    }
    jobs.par_iter()
        .map(|&(value, seed)| {
            let mut c = config.with_seed(seed);
            axis.apply(&mut c, value);
            let (source, target) = data_for(&c, flags.data.as_deref())?;
            let output = run_training(&c, &source, &target)?;
            Ok(SweepRow {
                value,
                seed,
                metrics: output.final_metrics().clone(),
            })
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,seed,os,os_star,all,unk\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            axis.name(),
            format_g17(r.value),
            r.seed,
            format_g17(m.os),
            format_g17(m.os_star),
            format_g17(m.all),
            m.unk.map_or(String::new(), format_g17)
        ));
    }
    out
}

pub fn cmd_sweep(
    config: &RunConfig,
    flags: &TrainFlags,
    axis: SweepAxis,
    values: &[f64],
) -> Result<()> {
    let rows = run_sweep(config, flags, axis, values)?;
    create_dir(&config.out_dir)?;
    let path = config.out_dir.join("sweep_results.csv");
    fs::write(&path, sweep_csv(axis, &rows)).map_err(|e| Error::io(&path, e))?;
    write_json(
        &config.out_dir.join("manifest.json"),
        &manifest("sweep", config, &["sweep_results.csv"]),
    )?;
    for &v in values {
        let os: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.metrics.os).collect();
        println!("{} = {v}: mean OS {:.1}", axis.name(), mean(os.into_iter()));
    }
    Ok(())
}

pub fn cmd_config(print_defaults: bool, check: Option<&Path>) -> Result<()> {
    let config = match check {
        Some(p) => {
            let c = RunConfig::load(p)?;
            c.validate()?;
            c
        }
        None if print_defaults => RunConfig::default(),
        None => {
            return Err(Error::Config(
                "nothing to do; pass --print-defaults or --check PATH".into(),
            ))
        }
    };
    let text = serde_json::to_string_pretty(&config).expect("config serializes");
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { overrides } => cmd_generate(&resolve_config(&overrides, None)?),
        Command::Train { overrides, flags } => {
            let config = resolve_config(&overrides, Some(&flags))?;
            cmd_train(&config, &flags)
        }
        Command::Eval {
            checkpoint,
            target,
            out,
        } => cmd_eval(&checkpoint, &target, out.as_deref()).map(|_| ()),
        Command::Sweep {
            overrides,
            flags,
            axis,
            values,
        } => {
            let config = resolve_config(&overrides, Some(&flags))?;
            cmd_sweep(&config, &flags, axis, &values)
        }
        Command::Config {
            print_defaults,
            check,
        } => cmd_config(print_defaults, check.as_deref()),
    }
}

/// Exit status for a finished command: 0 on success, 2 for invalid input,
/// 1 for failures during the run.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}
