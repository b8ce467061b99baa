use super::*;
use crate::capsnet::{load_checkpoint, CapsNetConfig, ClassCapsSpec, ConvBaseSpec, ConvLayerSpec, FeatureMap, PrimaryCapsSpec};
use crate::dataset::{DatasetManifest, ManifestEntry};
use crate::imaging::PreprocConfig;
use crate::synth::synthetic_set;
use crate::tensor::Tensor;

fn small_config(seed: u64) -> CapsNetConfig {
    let mut cfg = CapsNetConfig::new(
        ConvBaseSpec::Builtin {
            layers: vec![ConvLayerSpec::new(6, 5)],
        },
        PreprocConfig {
            target_size: 16,
            apply_he: false,
            rescale_01: true,
        },
    );
    cfg.primary_caps = PrimaryCapsSpec {
        channels: 4,
        dim: 4,
        kernel: 5,
        stride: 2,
    };
    cfg.class_caps = ClassCapsSpec { num_classes: 2, dim: 8 };
    cfg.seed = seed;
    cfg
}

fn samples(n: usize, seed: u64, cfg: &CapsNetConfig) -> Vec<Sample> {
    image_samples(synthetic_set(n, 24, seed), &cfg.preproc)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-2,
        batch_size: 4,
        augment: AugmentSpec::disabled(),
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn best_epoch_is_earliest_argmin() {
    assert_eq!(best_epoch(&[0.7, 0.5, 0.55, 0.49, 0.52]), Some(4));
    assert_eq!(best_epoch(&[0.3, 0.2, 0.2]), Some(2));
    assert_eq!(best_epoch(&[]), None);
}

#[test]
fn trace_jsonl_format() {
    let trace = TrainTrace::from_records(vec![
        EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            val_acc: 1.0,
        },
        EpochRecord {
            epoch: 2,
            train_loss: 0.4,
            val_loss: 0.125,
            val_acc: 0.75,
        },
    ])
    .unwrap();
    let text = trace.to_jsonl();
    assert_eq!(
        text.lines().next().unwrap(),
        r#"{"epoch":1,"train_loss":0.5,"val_loss":0.25,"val_acc":1.0}"#
    );
    let back = TrainTrace::from_jsonl(&text).unwrap();
    assert_eq!(back.epochs, trace.epochs);
    assert_eq!((back.best_epoch, back.best_val_acc_epoch), (2, 1));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig {
            early_stop: Some(EarlyStop {
                monitor: Monitor::ValAcc,
                patience: 0,
            }),
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }
}

#[test]
fn shuffle_depends_only_on_seed_and_epoch() {
    assert_eq!(epoch_order(30, 1, 4), epoch_order(30, 1, 4));
    assert_ne!(epoch_order(30, 1, 4), epoch_order(30, 1, 5));
    assert_ne!(epoch_order(30, 1, 4), epoch_order(30, 2, 4));
    let mut o = epoch_order(30, 1, 4);
    o.sort_unstable();
    assert_eq!(o, (0..30).collect::<Vec<_>>());
}

#[test]
fn loss_decreases_over_first_adam_steps() {
    let cfg = small_config(2);
    let mut model = CapsNet::new(cfg.clone()).unwrap();
    let batch = samples(8, 1, &cfg);
    let mut adam = Adam::new(model.params(), AdamConfig::default());
    let mut losses = Vec::new();
    for _ in 0..6 {
        losses.push(train_step(&mut model, &mut adam, &batch, 1e-4).unwrap());
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn training_is_deterministic_and_checkpoints_best() {
    let cfg = small_config(3);
    let train_set = samples(12, 1, &cfg);
    let val_set = samples(6, 2, &cfg);
    let mut tc = quick(6);
    tc.augment = AugmentSpec::default();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.caps"), dir.path().join("b.caps"));
    let a = train(CapsNet::new(cfg.clone()).unwrap(), &train_set, &val_set, &tc, Some(&p1)).unwrap();
    let b = train(CapsNet::new(cfg.clone()).unwrap(), &train_set, &val_set, &tc, Some(&p2)).unwrap();
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(a.trace.epochs.len(), 6);

    let loaded = load_checkpoint(&p1, Some(&cfg)).unwrap();
    assert_eq!(loaded, a.best_model);
    let recomputed = evaluate(&loaded, &val_set).unwrap().loss;
    assert!((recomputed - a.trace.best().val_loss).abs() < 1e-9);
}

#[test]
fn early_stop_on_flat_accuracy() {
    let cfg = small_config(4);
    let train_set = samples(4, 1, &cfg);
    let val_set = samples(4, 2, &cfg);
    let tc = TrainConfig {
        lr: 1e-12,
        early_stop: Some(EarlyStop {
            monitor: Monitor::ValAcc,
            patience: 3,
        }),
        ..quick(30)
    };
    let out = train(CapsNet::new(cfg).unwrap(), &train_set, &val_set, &tc, None).unwrap();
    assert!(out.trace.stopped_early);
    // Epoch 1 sets the reference; three flat epochs follow.
    assert_eq!(out.trace.epochs.len(), 4);
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let cfg = small_config(5);
    let train_set = samples(8, 1, &cfg);
    let val_set = samples(2, 2, &cfg);
    let tc = TrainConfig { lr: 1e300, ..quick(3) };
    match train(CapsNet::new(cfg).unwrap(), &train_set, &val_set, &tc, None) {
        Err(TrainError::Divergence { epoch, batch }) => {
            assert_eq!(epoch, 1);
            assert!(batch >= 2, "batch {batch}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_parts_rejected() {
    let cfg = small_config(1);
    let s = samples(2, 1, &cfg);
    let m = CapsNet::new(cfg).unwrap();
    assert!(matches!(train(m.clone(), &[], &s, &quick(1), None), Err(TrainError::Data(_))));
    assert!(matches!(train(m, &s, &[], &quick(1), None), Err(TrainError::Data(_))));
}

#[test]
fn missing_feature_names_id() {
    let manifest = DatasetManifest {
        name: "d".into(),
        entries: vec![ManifestEntry {
            id: "x1".into(),
            path: "x1.png".into(),
            label: Label::Normal,
        }],
    };
    let err = load_feature_samples(&manifest, &["x1".into()], &FeatureMap::new()).unwrap_err();
    assert!(err.to_string().contains("x1"), "{err}");
}

#[test]
fn external_features_train() {
    let mut cfg = small_config(6);
    cfg.conv_base = ConvBaseSpec::External {
        feature_shape: [4, 9, 9],
    };
    cfg.primary_caps.kernel = 3;
    let mut map = FeatureMap::new();
    let mut entries = Vec::new();
    for i in 0..6 {
        let id = format!("f{i}");
        let label = if i % 2 == 0 { Label::Glaucoma } else { Label::Normal };
        let level = if label == Label::Glaucoma { 0.8 } else { 0.1 };
        map.insert(id.clone(), Tensor::full(&[4, 9, 9], level + 0.01 * i as f64));
        entries.push(ManifestEntry {
            id,
            path: "unused".into(),
            label,
        });
    }
    let manifest = DatasetManifest { name: "feat".into(), entries };
    let ids = manifest.ids();
    let set = load_feature_samples(&manifest, &ids, &map).unwrap();
    let out = train(CapsNet::new(cfg).unwrap(), &set, &set, &quick(3), None).unwrap();
    assert_eq!(out.trace.epochs.len(), 3);
}
