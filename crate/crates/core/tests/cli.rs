use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use osm_core::cli::{resolve_config, Ablation, Overrides, RunConfig, TrainFlags};

fn osm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let mut c = RunConfig::default();
    c.data.samples_per_class = 24;
    c.train.epochs_stage1 = 2;
    c.train.epochs_stage2 = 2;
    c.train.batch_size = 16;
    c.out_dir = dir.join("run");
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn print_defaults_round_trips() {
    let o = osm(&["config", "--print-defaults"]);
    assert!(o.status.success());
    let parsed: RunConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(parsed, RunConfig::default());
}

#[test]
fn generate_writes_reproducible_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = osm(&["generate", "--out", out.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["source.csv", "target.csv", "manifest.json"] {
        assert!(out.join(f).exists());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    // regenerate from the config recorded in the manifest
    let mut config: RunConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    let again = dir.path().join("again");
    config.out_dir = again.clone();
    let cfg_path = dir.path().join("from_manifest.json");
    fs::write(&cfg_path, serde_json::to_string(&config).unwrap()).unwrap();
    let o = osm(&["generate", "--config", cfg_path.to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["source.csv", "target.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"data": {"unknown_ratio": 1.5}}"#).unwrap();
    let o = osm(&["generate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown_ratio"));

    fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = osm(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn flags_override_the_config() {
    let flags = TrainFlags {
        ablate: Some(Ablation::NoSca),
        static_margin: Some(20.0),
        omega: Some(1.5),
        seeds: 1,
        data: None,
    };
    let c = resolve_config(&Overrides::default(), Some(&flags)).unwrap();
    assert!(c.train.disable_sca && !c.train.disable_scm);
    let w = c.train.effective_weights();
    assert_eq!((w.lambda_s, w.lambda_c), (0.0, 0.0));
    assert_eq!(c.train.static_margin, Some(20.0));
    assert_eq!(c.train.weights.omega, 1.5);
    let flags = TrainFlags {
        ablate: Some(Ablation::AdaOnly),
        seeds: 1,
        ..TrainFlags::default()
    };
    let c = resolve_config(&Overrides::default(), Some(&flags)).unwrap();
    assert_eq!(c.train.effective_weights().lambda_t, 0.0);
    assert!(c.train.disable_sca);
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let o = osm(&["generate", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let o = osm(&["train", "--config", &cfg, "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "checkpoint.json",
        "metrics.json",
        "trace.csv",
        "stage1.csv",
        "embeddings.csv",
        "manifest.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    let ckpt = run.join("checkpoint.json");
    let target = data.join("target.csv");
    let e1 = dir.path().join("eval1");
    let e2 = dir.path().join("eval2");
    for e in [&e1, &e2] {
        let o = osm(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--target",
            target.to_str().unwrap(),
            "--out",
            e.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let trained = fs::read(run.join("metrics.json")).unwrap();
    assert_eq!(fs::read(e1.join("metrics.json")).unwrap(), trained);
    assert_eq!(fs::read(e2.join("metrics.json")).unwrap(), trained);

    let o = osm(&[
        "eval",
        "--checkpoint",
        dir.path().join("missing.json").to_str().unwrap(),
        "--target",
        target.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.json"));

    // a target with the wrong feature count
    let narrow = dir.path().join("narrow.csv");
    fs::write(&narrow, "domain,label,f0,f1\ntarget,0,0.5,1.5\ntarget,4,1,2\n").unwrap();
    let o = osm(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--target",
        narrow.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn several_seeds_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("multi");
    let o = osm(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in 0..3 {
        assert!(out.join(format!("seed_{s}/metrics.json")).exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 3);

    let sweep = dir.path().join("sweep");
    let o = osm(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        sweep.to_str().unwrap(),
        "--axis",
        "omega",
        "--values",
        "0,1.5",
        "--seeds",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(sweep.join("sweep_results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.starts_with("axis,value,seed,os,os_star,all,unk\n"));

    let o = osm(&["sweep", "--config", &cfg, "--axis", "omega", "--values"]);
    assert_eq!(o.status.code(), Some(2));
    let o = osm(&["sweep", "--config", &cfg, "--axis", "threshold", "--values", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}
