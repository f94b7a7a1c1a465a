use std::f64::consts::{FRAC_PI_2, LN_2};

use proptest::prelude::*;
use stam::data::{default_classes, load_batch, Dataset, DatasetManifest, Split, TextureClass, Window};
use stam::model::{ModelConfig, StamParams, Variant};
use stam::tensor::{Tape, Tensor};
use stam::train::{
    cross_entropy_loss, evaluate, evaluate_items, run_ablation, sgd_step, train, AblationGrid, AblationReport,
    TrainConfig, TrainError,
};

fn loss_of(logits: &[f64], label: usize) -> f64 {
    cross_entropy_loss(&Tensor::new(&[logits.len()], logits.to_vec()).unwrap(), label).unwrap().values()[0]
}

fn small_config(variant: Variant, classes: usize) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        patience: 3,
        n: 3,
        model: ModelConfig {
            frame_height: 16,
            frame_width: 16,
            backbone_channels: vec![2, 3, 4],
            heads: 2,
            classes,
            variant,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn small_manifest(classes: usize, per_class: usize) -> DatasetManifest {
    DatasetManifest {
        classes,
        sequences_per_class: per_class,
        frames_per_sequence: 7,
        frame_height: 16,
        frame_width: 16,
        seed: 4,
        ..DatasetManifest::default()
    }
}

#[test]
fn uniform_logits_give_log_k() {
    assert!((loss_of(&[0.3; 4], 2) - 4f64.ln()).abs() < 1e-15);
    assert!((loss_of(&[-1.0, -1.0], 0) - LN_2).abs() < 1e-15);
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let l = loss_of(&[0.0, 30.0, 0.0, 0.0, 0.0], 1);
    assert!((0.0..1e-9).contains(&l), "{l}");
}

#[test]
fn loss_rejects_bad_inputs() {
    assert!(matches!(cross_entropy_loss(&Tensor::zeros(&[3]), 3), Err(TrainError::Contract(_))));
    assert!(matches!(cross_entropy_loss(&Tensor::zeros(&[2, 2]), 0), Err(TrainError::Contract(_))));
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut rng = common::rng(9);
    for label in 0..6 {
        let logits = common::random(&mut rng, &[6]);
        let mut tape = Tape::new();
        let x = tape.param(logits.clone());
        let l = tape.cross_entropy(x, label).unwrap();
        tape.backward(l).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..6 {
            let mut up = logits.values().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (loss_of(&up, label) - loss_of(&down, label)) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-7, "label {label} logit {i}: {} vs {fd} ({rel})", analytic[i]);
        }
    }
}

proptest! {
    #[test]
    fn loss_finite_for_large_logits(values in prop::collection::vec(-1e3f64..1e3, 2..12), pick in 0usize..12) {
        let label = pick % values.len();
        let l = loss_of(&values, label);
        prop_assert!(l.is_finite() && l >= 0.0);
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        prop_assert!((l - (lse - values[label])).abs() <= 1e-9 * lse.abs().max(1.0));
    }

    #[test]
    fn zero_learning_rate_leaves_params(p in prop::collection::vec(-5f64..5.0, 1..8), m in 0f64..1.0) {
        let params = [Tensor::new(&[p.len()], p.clone()).unwrap()];
        let grads = [Tensor::full(&[p.len()], 0.7)];
        let velocity = [Tensor::full(&[p.len()], -0.2)];
        let (np, _) = sgd_step(&params, &grads, 0.0, m, &velocity).unwrap();
        prop_assert_eq!(&np[0], &params[0]);
    }
}

#[test]
fn plain_step_subtracts_gradient() {
    let p = [Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()];
    let g = [Tensor::new(&[3], vec![0.5, -1.0, 4.0]).unwrap()];
    let (np, nv) = sgd_step(&p, &g, 1.0, 0.0, &[Tensor::zeros(&[3])]).unwrap();
    assert_eq!(np[0].values(), &[0.5, 3.0, -1.0]);
    assert_eq!(nv[0], g[0]);
}

#[test]
fn zero_gradient_decays_velocity() {
    let p = [Tensor::new(&[2], vec![1.0, -1.0]).unwrap()];
    let v = [Tensor::new(&[2], vec![2.0, 4.0]).unwrap()];
    let (np, nv) = sgd_step(&p, &[Tensor::zeros(&[2])], 0.0, 0.9, &v).unwrap();
    assert_eq!(np[0], p[0]);
    assert_eq!(nv[0].values(), &[0.9 * 2.0, 0.9 * 4.0]);
}

#[test]
fn momentum_on_quadratic_matches_hand_recurrence() {
    // x0 = 1, g = 2x: v1 = 2, x1 = 0.8; v2 = 0.9·2 + 1.6 = 3.4, x2 = 0.46
    let mut p = vec![Tensor::scalar(1.0)];
    let mut v = vec![Tensor::scalar(0.0)];
    let mut xs = Vec::new();
    for _ in 0..2 {
        let g = vec![Tensor::scalar(2.0 * p[0].values()[0])];
        (p, v) = sgd_step(&p, &g, 0.1, 0.9, &v).unwrap();
        xs.push(p[0].values()[0]);
    }
    assert!((xs[0] - 0.8).abs() < 1e-15);
    assert!((xs[1] - 0.46).abs() < 1e-15);
    assert!((v[0].values()[0] - 3.4).abs() < 1e-15);
}

#[test]
fn sgd_rejects_mismatched_shapes() {
    let p = [Tensor::zeros(&[2])];
    assert!(matches!(sgd_step(&p, &[Tensor::zeros(&[3])], 0.1, 0.9, &p), Err(TrainError::Contract(_))));
    assert!(matches!(sgd_step(&p, &p, 0.1, 0.9, &[]), Err(TrainError::Contract(_))));
}

#[test]
fn first_epoch_lowers_loss_on_default_set() {
    let ds = Dataset::generate(&DatasetManifest::default()).unwrap();
    let out = train(&TrainConfig { epochs: 1, ..TrainConfig::default() }, &ds).unwrap();
    assert_eq!(out.epochs.len(), 1);
    assert!(out.epochs[0].train_loss < out.initial_loss, "{} vs {}", out.epochs[0].train_loss, out.initial_loss);
}

#[test]
fn same_seed_same_trace() {
    let ds = Dataset::generate(&small_manifest(3, 10)).unwrap();
    let cfg = small_config(Variant::FullStam, 3);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.metrics_table(), b.metrics_table());
    assert_eq!(a.params, b.params);
    let c = train(&TrainConfig { seed: 1, ..cfg }, &ds).unwrap();
    assert_ne!(a.metrics_table(), c.metrics_table());
}

#[test]
fn separable_toy_textures_are_learned() {
    let base = TextureClass { micro_noise: 0.05, ..default_classes(2)[0].clone() };
    let classes = [
        TextureClass { class_id: 0, weave_period_u: 4.0, orientation: 0.0, ..base.clone() },
        TextureClass { class_id: 1, weave_period_u: 8.0, orientation: FRAC_PI_2, ..base },
    ];
    let manifest = DatasetManifest { classes: 2, sequences_per_class: 40, frames_per_sequence: 8, ..Default::default() };
    let ds = Dataset::generate_with(&manifest, &classes, &manifest.render_params()).unwrap();
    let mut cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
    cfg.model.classes = 2;
    cfg.model.variant = Variant::CnnOnly;
    let out = train(&cfg, &ds).unwrap();
    let test = evaluate(&out.params, &ds, Split::Test, &cfg).unwrap();
    assert!(test.accuracy >= 0.95, "{}", test.accuracy);
}

#[test]
fn random_weights_stay_in_chance_band() {
    let ds = Dataset::generate(&DatasetManifest::default()).unwrap();
    let cfg = TrainConfig::default();
    let items = load_batch(&ds, &ds.ids(Split::Test), cfg.window, cfg.n).items;
    assert_eq!(items.len(), 60);
    for seed in 0..20 {
        let params = StamParams::init(&cfg.model_config(), 100 + seed).unwrap();
        let e = evaluate_items(&params, &items).unwrap();
        assert!((0.0..=0.35).contains(&e.accuracy), "seed {seed}: {}", e.accuracy);
        assert_eq!(e.total(), 60);
    }
}

#[test]
fn five_samples_are_memorized() {
    let mut ds = Dataset::generate(&small_manifest(5, 2)).unwrap();
    for r in &mut ds.records {
        r.split = Split::Test;
    }
    let chosen: Vec<usize> = (0..5).map(|c| c * 2).collect();
    for &id in &chosen {
        let pos = ds.records.iter().position(|r| r.id == id).unwrap();
        ds.records[pos].split = Split::Train;
        let mut copy = ds.records[pos].clone();
        copy.id += 1000;
        copy.split = Split::Val;
        ds.records.push(copy);
        ds.samples.push(ds.samples[pos].clone());
    }
    let mut cfg = small_config(Variant::FullStam, 5);
    cfg.epochs = 80;
    cfg.patience = 80;
    cfg.batch_size = 5;
    let out = train(&cfg, &ds).unwrap();
    let e = evaluate(&out.params, &ds, Split::Train, &cfg).unwrap();
    assert_eq!(e.accuracy, 1.0);
    assert_eq!(e.total(), 5);
}

#[test]
fn confusion_accounts_for_every_sample() {
    let ds = Dataset::generate(&small_manifest(4, 10)).unwrap();
    let cfg = small_config(Variant::CnnSpatial, 4);
    let params = StamParams::init(&cfg.model_config(), 3).unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        let e = evaluate(&params, &ds, split, &cfg).unwrap();
        assert_eq!(e.total(), ds.ids(split).len());
        for (c, row) in e.confusion.iter().enumerate() {
            let expected = ds.records.iter().filter(|r| r.split == split && r.label == c).count();
            assert_eq!(row.iter().sum::<usize>(), expected);
        }
        let diag: usize = (0..4).map(|c| e.confusion[c][c]).sum();
        assert_eq!(e.accuracy, diag as f64 / e.total() as f64);
    }
}

#[test]
fn evaluation_ignores_sample_order() {
    let ds = Dataset::generate(&small_manifest(3, 10)).unwrap();
    let cfg = small_config(Variant::FullStam, 3);
    let params = StamParams::init(&cfg.model_config(), 8).unwrap();
    let mut items = load_batch(&ds, &ds.ids(Split::Train), Window::FromOnset, 3).items;
    let a = evaluate_items(&params, &items).unwrap();
    items.reverse();
    let b = evaluate_items(&params, &items).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.confusion, b.confusion);
    assert!((a.mean_loss - b.mean_loss).abs() < 1e-12);
}

#[test]
fn empty_split_is_a_config_error() {
    let ds = Dataset::generate(&DatasetManifest { split_ratio: [1, 0, 1], ..small_manifest(2, 4) }).unwrap();
    assert_eq!(ds.ids(Split::Val).len(), 0);
    assert!(matches!(train(&small_config(Variant::CnnOnly, 2), &ds), Err(TrainError::Config(_))));
}

#[test]
fn ablation_records_failures_and_round_trips() {
    let ds = Dataset::generate(&small_manifest(2, 10)).unwrap();
    let base = TrainConfig { epochs: 1, ..small_config(Variant::CnnOnly, 2) };
    let grid = AblationGrid {
        variants: vec![Variant::CnnOnly, Variant::FullStam],
        lengths: vec![2, 7],
        windows: Window::ALL.to_vec(),
        seeds: vec![0],
    };
    let report = run_ablation(&base, &ds, &grid, 2).unwrap();
    assert_eq!(report.cells.len(), 8);
    for cell in &report.cells {
        let fits = cell.key.n == 2 || cell.key.window == Window::FromStart;
        assert_eq!(cell.outcome.is_ok(), fits, "{:?}", cell.key);
        assert_eq!(cell.config_hash.len(), 64);
    }
    assert_eq!(report.completed(), 6);
    assert_eq!(AblationReport::from_table(&report.to_table()).unwrap(), report);

    let again = run_ablation(&base, &ds, &grid, 1).unwrap();
    for (a, b) in report.cells.iter().zip(&again.cells) {
        assert_eq!(a.key, b.key);
        assert_eq!(a.config_hash, b.config_hash);
        match (&a.outcome, &b.outcome) {
            (Ok(x), Ok(y)) => assert_eq!((x.test_accuracy, x.train_accuracy, x.epochs), (y.test_accuracy, y.train_accuracy, y.epochs)),
            (Err(_), Err(_)) => {}
            _ => panic!("outcome changed for {:?}", a.key),
        }
    }
}

mod common;
