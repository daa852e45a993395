//! Cross-module integration checks: training improves robustness, saved
//! checkpoints evaluate consistently, and the training log agrees with
//! evaluation on the same data.

use neokd::attack::{AttackConfig, AttackKind};
use neokd::data::{synthetic_gaussians, SplitTag};
use neokd::eval::eval_anytime;
use neokd::loss::{DistillConfig, LossKind};
use neokd::net::{MultiExitNetwork, NetworkSpec};
use neokd::train::{train, TrainConfig};

fn quick_attack(kind: AttackKind, steps: usize) -> AttackConfig {
    AttackConfig {
        kind,
        epsilon: 0.08,
        step_size: 0.03,
        steps,
        random_start: false,
        seed: 11,
    }
}

fn quick_cfg(kind: LossKind, exits: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 0.02,
        lr_decay_epochs: vec![],
        lr_decay_factor: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        train_attack: quick_attack(AttackKind::MaxAverage, 3),
        loss_kind: kind,
        distill: DistillConfig::defaults(exits),
        seed: 5,
        probe_attack: None,
        threads: 2,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn training_improves_adversarial_accuracy_over_init() {
    // 2-exit net on a small synthetic set: after 30 epochs of the full
    // objective, average-attack accuracy must exceed the untrained value.
    let spec = NetworkSpec {
        input_dim: 16,
        block_widths: vec![vec![12], vec![8]],
        classes: 4,
        init_seed: 3,
    };
    let train_set = synthetic_gaussians(4, 16, 60, 21, 0.12).unwrap();
    let test_set = synthetic_gaussians(4, 16, 25, 22, 0.12).unwrap();
    let eval_attack = quick_attack(AttackKind::Average, 10);

    let net0 = MultiExitNetwork::init(&spec).unwrap();
    let adv_acc = |net: &MultiExitNetwork| -> f64 {
        let report = eval_anytime(
            net,
            &test_set,
            &[("average".into(), Some(eval_attack.clone()))],
            64,
            2,
        )
        .unwrap();
        report.entries[0].avg_top1
    };
    let before = adv_acc(&net0);
    let (trained, log) = train(net0, &train_set, None, &quick_cfg(LossKind::NeoKd, 2, 30)).unwrap();
    let after = adv_acc(&trained);
    assert_eq!(log.epochs.len(), 30);
    assert!(
        after > before,
        "adversarial accuracy did not improve: {before} → {after}"
    );
}

#[test]
fn saved_checkpoint_evaluates_like_the_training_probe() {
    // Train with the test set as the probe; the final probe accuracies must
    // match a fresh evaluation of the saved checkpoint exactly.
    let spec = NetworkSpec {
        input_dim: 16,
        block_widths: vec![vec![10], vec![8]],
        classes: 4,
        init_seed: 9,
    };
    let train_set = synthetic_gaussians(4, 16, 40, 31, 0.12).unwrap();
    let probe = synthetic_gaussians(4, 16, 15, 32, 0.12).unwrap();
    let cfg = quick_cfg(LossKind::Baseline, 2, 4);
    let (net, log) = train(
        MultiExitNetwork::init(&spec).unwrap(),
        &train_set,
        Some(&probe),
        &cfg,
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mxnn");
    net.save(&path).unwrap();
    let reloaded = MultiExitNetwork::load(&path).unwrap();

    let report = eval_anytime(&reloaded, &probe, &[("clean".into(), None)], 64, 1).unwrap();
    let probe_acc = log.epochs.last().unwrap().probe_clean_acc.clone().unwrap();
    assert_eq!(report.entries[0].per_exit_top1, probe_acc);
}

#[test]
fn official_mnist_files_load_with_expected_constants() {
    // Exercised only when the standard MNIST IDX files are present.
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    if !images.exists() || !labels.exists() {
        eprintln!("skipping: no MNIST files under data/mnist/");
        return;
    }
    let ds = neokd::data::load_idx(&images, &labels).unwrap();
    assert_eq!(ds.len(), 60_000);
    assert_eq!(ds.dim(), 784);
    assert_eq!(ds.classes, 10);
}

#[test]
fn probe_tag_roundtrip_keeps_split_tags() {
    let ds = synthetic_gaussians(3, 8, 10, 1, 0.1).unwrap();
    let sub = ds.take(5, SplitTag::Val);
    assert_eq!(sub.tag, SplitTag::Val);
    assert_eq!(sub.len(), 5);
}
