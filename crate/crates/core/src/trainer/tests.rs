#![allow(clippy::needless_range_loop)]

use super::*;
use crate::autodiff::gradcheck::{random_matrix, relative_error};
use crate::data::{generate_pair, Domain, LabeledSample, SyntheticConfig};
use crate::model::{ArchConfig, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 100, 2e-4), 2e-4);
    assert!(cosine_lr(100, 100, 2e-4).abs() < 1e-20);
    assert!((cosine_lr(50, 100, 2e-4) - 1e-4).abs() < 1e-18);
    let trace: Vec<f64> = (0..=40).map(|s| cosine_lr(s, 40, 1.0)).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn pseudo_labels_and_reliability() {
    let uniform = Matrix::zeros(1, 3);
    let (y, r) = pseudo_label(&uniform, 1.0 / 3.0);
    assert_eq!((y, r), (vec![0], vec![false]));
    let p = [0.7f64, 0.2, 0.1];
    let logits = Matrix::row_vector(&p.map(f64::ln));
    let (y, r) = pseudo_label(&logits, 1.0 / 3.0);
    assert_eq!((y, r), (vec![0], vec![true]));
    let tie = Matrix::row_vector(&[0.0, 2.0, 2.0]);
    assert_eq!(pseudo_label(&tie, 0.0).0, vec![1]);
}

#[test]
fn adam_fixed_point_and_decay() {
    let mut p = Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap();
    let before = p.clone();
    let mut state = AdamState::new([&p]);
    let zero = [Matrix::zeros(1, 2)];
    adam_step(vec![&mut p], &zero, &mut state, 1e-3, 0.0).unwrap();
    assert_eq!(p, before);
    adam_step(vec![&mut p], &zero, &mut state, 1e-3, 0.5).unwrap();
    assert_eq!(p.as_slice(), &[1.5 * (1.0 - 5e-4), -2.0 * (1.0 - 5e-4)]);
}

#[test]
fn adam_matches_scripted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let theta: f64 = rng.random_range(-3.0..3.0);
        let lr: f64 = rng.random_range(1e-5..1e-1);
        let wd: f64 = rng.random_range(0.0..1e-2);
        let steps = rng.random_range(1..5);
        let grads: Vec<f64> = (0..steps).map(|_| rng.random_range(-2.0..2.0)).collect();

        let (mut x, mut m, mut v) = (theta, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            x *= 1.0 - lr * wd;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }

        let mut p = Matrix::scalar(theta);
        let mut state = AdamState::new([&p]);
        for &g in &grads {
            adam_step(vec![&mut p], &[Matrix::scalar(g)], &mut state, lr, wd).unwrap();
        }
        assert!((p.item() - x).abs() < 1e-12);
    }
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig {
            epochs_stage1: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs_stage2: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            reliability_threshold: Some(1.0),
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().unwrap_err().is_validation());
    }
    assert_eq!(TrainConfig::default().threshold(4), 0.2);
}

fn blobs(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for i in 0..200 {
        let label = i % 2;
        let center = if label == 0 { -2.0 } else { 2.0 };
        let features = (0..4)
            .map(|d| if d == 0 { center } else { 0.0 } + rng.random_range(-1.0..1.0))
            .collect();
        samples.push(LabeledSample {
            features,
            label,
            domain: Domain::Source,
        });
    }
    Dataset::new(samples)
}

#[test]
fn stage1_separates_blobs_deterministically() {
    let data = blobs(3);
    let spec = ModelSpec::new(&ArchConfig::default(), 4, 2);
    let config = TrainConfig::default();
    let mut a = NetworkParams::init(&spec, 0).unwrap();
    let trace = pretrain_stage1(&config, &mut a, &data).unwrap();
    assert_eq!(trace.len(), config.epochs_stage1);
    let (_, logits) = a.infer(&data.all_features()).unwrap();
    let predicted = logits.argmax_rows();
    let correct = predicted.iter().zip(data.labels()).filter(|(p, y)| **p == *y).count();
    assert!(correct as f64 / data.len() as f64 >= 0.95, "{correct}");
    let mut b = NetworkParams::init(&spec, 0).unwrap();
    pretrain_stage1(&config, &mut b, &data).unwrap();
    assert_eq!(a, b);
}

fn toy() -> (NetworkParams, Matrix, Vec<usize>, Matrix, CentroidBank) {
    let arch = ArchConfig {
        encoder_widths: vec![5],
        generator_widths: vec![4],
        ..ArchConfig::default()
    };
    let spec = ModelSpec::new(&arch, 4, 3);
    let net = NetworkParams::init(&spec, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = random_matrix(&mut rng, 4, 4, 1.5);
    let xt = random_matrix(&mut rng, 4, 4, 1.5);
    let bank = CentroidBank {
        source: (0..3).map(|_| random_matrix(&mut rng, 1, 4, 1.0).into_vec()).collect(),
        target: (0..3).map(|_| random_matrix(&mut rng, 1, 4, 1.0).into_vec()).collect(),
        iteration: 0,
    };
    (net, xs, vec![0, 1, 2, 1], xt, bank)
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (base, xs, ys, xt, bank) = toy();
    let config = TrainConfig {
        freeze_encoder: false,
        // every target row reliable so the mapping term sees both kinds
        reliability_threshold: Some(0.0),
        weights: LossWeights {
            lambda_s: 0.3,
            lambda_c: 0.2,
            lambda_t: 0.5,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let run = |net: &NetworkParams, ctx: Option<&StepContext>| {
        let mut net = net.clone();
        let mut bank = bank.clone();
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let (s, ctx) =
            build_step(&mut g, &mut net, &bound, &xs, &ys, &xt, &mut bank, ctx, &config).unwrap();
        let total = g.value(s.total).item();
        let adv = g.value(s.terms.adv).item();
        g.backward(s.total).unwrap();
        (total, adv, bound.grads(&g), ctx, s)
    };
    let (_, _, analytic, ctx, s) = run(&base, None);
    assert!(s.terms.cct.is_some() && s.terms.cca.is_some() && s.terms.con.is_some());
    assert!(ctx.pseudo.iter().any(|&y| y < 3));

    // D sees the plain objective; E and G see the adversarial term reversed.
    let d_start = base.tensors().len() - base.discriminator.tensors().len();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for t in 0..base.tensors().len() {
        for idx in 0..base.tensors()[t].len() {
            let eval = |delta: f64| {
                let mut net = base.clone();
                net.tensors_mut()[t].as_mut_slice()[idx] += delta;
                let (total, adv, ..) = run(&net, Some(&ctx));
                if t >= d_start {
                    total
                } else {
                    total - 2.0 * adv
                }
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max(relative_error(analytic[t].as_slice()[idx], numeric));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn ablation_flags_match_zero_weights_bitwise() {
    let (base, xs, ys, xt, bank) = toy();
    let grads = |config: &TrainConfig| {
        let mut net = base.clone();
        let mut bank = bank.clone();
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let (s, _) =
            build_step(&mut g, &mut net, &bound, &xs, &ys, &xt, &mut bank, None, config).unwrap();
        g.backward(s.total).unwrap();
        (g.value(s.total).item(), bound.grads(&g))
    };
    let full = TrainConfig::default();
    let no_scm = TrainConfig {
        disable_scm: true,
        ..full.clone()
    };
    let zero_t = TrainConfig {
        weights: LossWeights {
            lambda_t: 0.0,
            ..LossWeights::default()
        },
        ..full.clone()
    };
    assert_eq!(grads(&no_scm), grads(&zero_t));
    let no_sca = TrainConfig {
        disable_sca: true,
        ..full.clone()
    };
    let zero_sc = TrainConfig {
        weights: LossWeights {
            lambda_s: 0.0,
            lambda_c: 0.0,
            ..LossWeights::default()
        },
        ..full.clone()
    };
    assert_eq!(grads(&no_sca), grads(&zero_sc));
    assert_ne!(grads(&full).1, grads(&no_sca).1);
}

fn small_problem() -> (Dataset, Dataset, ModelSpec) {
    let cfg = SyntheticConfig {
        samples_per_class: 40,
        ..SyntheticConfig::default()
    };
    let (s, t) = generate_pair(&cfg).unwrap();
    let spec = ModelSpec::new(&ArchConfig::default(), cfg.dim, cfg.n_known);
    (s, t, spec)
}

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs_stage1: 2,
        epochs_stage2: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn stage2_is_deterministic_and_respects_frozen_encoder() {
    let (s, t, spec) = small_problem();
    let config = short_config();
    let a = train(&config, &spec, &s, &t).unwrap();
    let b = train(&config, &spec, &s, &t).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.stage2.trace, b.stage2.trace);
    assert_eq!(a.stage2.trace.len(), 3);

    let mut net = NetworkParams::init(&spec, 0).unwrap();
    pretrain_stage1(&config, &mut net, &s).unwrap();
    let encoder = net.encoder.clone();
    let generator = net.generator.clone();
    train_stage2(&config, &mut net, &s, &t).unwrap();
    assert_eq!(net.encoder, encoder);
    assert_ne!(net.generator, generator);

    let lrs: Vec<f64> = a.stage2.trace.iter().map(|r| r.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn disabling_both_modules_is_ada_only() {
    let (s, t, spec) = small_problem();
    let ablated = TrainConfig {
        disable_sca: true,
        disable_scm: true,
        ..short_config()
    };
    let zero = TrainConfig {
        weights: LossWeights {
            lambda_s: 0.0,
            lambda_c: 0.0,
            lambda_t: 0.0,
            ..LossWeights::default()
        },
        ..short_config()
    };
    let a = train(&ablated, &spec, &s, &t).unwrap();
    let b = train(&zero, &spec, &s, &t).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.stage2.trace, b.stage2.trace);
}

#[test]
fn divergence_names_the_component() {
    let (s, t, spec) = small_problem();
    let mut net = NetworkParams::init(&spec, 0).unwrap();
    net.discriminator.layers[0].bias.as_mut_slice()[0] = f64::NAN;
    let err = train_stage2(&short_config(), &mut net, &s, &t).unwrap_err();
    assert!(matches!(err, Error::Divergence { ref component, epoch: 0 } if component == "cls"));
}
