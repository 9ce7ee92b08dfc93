use super::*;
use crate::data::manifest::tests::record;
use crate::data::{Label, ScanMeta, SequenceType, Side};
use crate::model::layers::Parameters;
use crate::preprocess::CROP_SIZE;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-slice scans; tears carry a bright square on one slice.
fn toy_scan(id: usize, positive: bool, modality: Modality) -> VolumeScan {
    let mut rng = ChaCha8Rng::seed_from_u64(id as u64);
    let mut v = Array3::from_shape_simple_fn((2, CROP_SIZE, CROP_SIZE), || 0.3 + 0.05 * rng.random::<f32>());
    if positive {
        let (k, y, x) = (
            rng.random_range(0..2),
            rng.random_range(40..150),
            rng.random_range(40..150),
        );
        v.slice_mut(ndarray::s![k, y..y + 30, x..x + 30])
            .mapv_inplace(|b| b + 0.6);
    }
    VolumeScan::new(
        v,
        ScanMeta {
            view: View::Sagittal,
            sequence_type: SequenceType::T2,
            fat_sat: true,
            modality,
            series_id: format!("s{id}"),
            study_id: format!("st{id}"),
            side: Side::Right,
        },
    )
    .unwrap()
}

fn toy_set(range: std::ops::Range<usize>) -> Vec<Example> {
    range
        .map(|i| {
            let positive = i % 3 == 0;
            Example::from_scan(
                toy_scan(i, positive, Modality::Standard),
                Label::from_positive(positive),
            )
        })
        .collect()
}

fn fast_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 15,
        patience: 10,
        learning_rate: 1e-2,
        batch_scans: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn desk_model(seed: u64) -> ScanClassifier {
    ScanClassifier::new(EncoderConfig::desk_scale(16, seed)).unwrap()
}

#[test]
fn stopping_rule_examples() {
    // [0.6, 0.7, 0.65, 0.65, ...] with patience 10.
    let mut s = EarlyStopping::new(10);
    let mut seq = vec![0.6, 0.7];
    seq.extend(std::iter::repeat_n(0.65, 20));
    let mut stopped = None;
    for (i, &a) in seq.iter().enumerate() {
        if s.observe(i + 1, a).1 {
            stopped = Some(i + 1);
            break;
        }
    }
    assert_eq!(stopped, Some(12));
    assert_eq!(s.best_epoch(), Some(2));

    let mut s = EarlyStopping::new(10);
    for e in 1..=30 {
        assert!(!s.observe(e, e as f64 / 100.0).1);
    }
    assert_eq!(s.best_epoch(), Some(30));

    let mut s = EarlyStopping::new(10);
    for (e, a) in [0.5, 0.6, 0.8, 0.7, 0.8, 0.6].into_iter().enumerate() {
        s.observe(e + 1, a);
    }
    assert_eq!(s.best_epoch(), Some(3));
}

#[test]
fn pos_weight_from_manifest() {
    let build = |pos: usize, neg: usize| {
        let mut records = Vec::new();
        for i in 0..pos + neg {
            let mut r = record(
                &format!("s{i}"),
                &format!("p{i}"),
                Label::from_positive(i < pos),
                Modality::Standard,
            );
            r.split = Split::Train;
            records.push(r);
        }
        // Other splits and modalities must not count.
        let mut val = record("v", "pv", Label::Tear, Modality::Standard);
        val.split = Split::Val;
        records.push(val);
        let mut mra = record("m", "pm", Label::Tear, Modality::Arthrogram);
        mra.split = Split::Train;
        records.push(mra);
        DatasetManifest::new(records).unwrap()
    };
    assert_eq!(compute_pos_weight(&build(50, 50), Modality::Standard).unwrap(), 1.0);
    // 224 training scans at 8.7% positive: 19 tears.
    let w = compute_pos_weight(&build(19, 205), Modality::Standard).unwrap();
    assert_eq!(w, 205.0 / 19.0);
    let rounded_oracle = (224.0 - 19.5) / 19.5;
    assert!((w - rounded_oracle).abs() < 0.35, "{w} vs {rounded_oracle}");
    assert!(matches!(
        compute_pos_weight(&build(0, 10), Modality::Standard),
        Err(TrainingError::ClassImbalance {
            positives: 0,
            negatives: 10
        })
    ));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            patience: 0,
            ..Default::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        },
        TrainConfig {
            max_epochs: 0,
            ..Default::default()
        },
        TrainConfig {
            batch_scans: 0,
            ..Default::default()
        },
        TrainConfig {
            pos_weight_mode: PosWeightMode::Manual,
            ..Default::default()
        },
        TrainConfig {
            pos_weight_mode: PosWeightMode::Manual,
            pos_weight: Some(-1.0),
            ..Default::default()
        },
    ] {
        assert!(
            matches!(bad.validate(), Err(TrainingError::InvalidConfig(_))),
            "{bad:?}"
        );
    }
    let parsed: TrainConfig =
        serde_json::from_str(r#"{"max_epochs": 3, "pos_weight_mode": "manual", "pos_weight": 2.5}"#).unwrap();
    assert_eq!(parsed.pos_weight, Some(2.5));
    assert_eq!(parsed.patience, 10);
}

#[test]
fn mean_loss_gradient_matches_finite_differences() {
    let mut model = desk_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    model.head.weight.mapv_inplace(|_| rng.random::<f64>() - 0.5);
    let scans: Vec<(VolumeScan, bool)> = (0..4)
        .map(|i| (toy_scan(i, i % 2 == 0, Modality::Standard), i % 2 == 0))
        .collect();
    let (_, grad) = mean_loss_and_gradient(&model, &scans, 2.5).unwrap();
    let mut analytic = Vec::new();
    grad.visit("", &mut |n, a| {
        analytic.push((n.to_string(), a.iter().copied().collect::<Vec<f64>>()))
    });
    let eps = 1e-7;
    let base = mean_loss_and_gradient(&model, &scans, 2.5).unwrap().0;
    for (t, (name, g)) in analytic.iter().enumerate() {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut checked = 0;
        for &e in &order {
            let loss_at = |d: f64| {
                let mut m = model.clone();
                let mut k = 0;
                m.visit_mut("", &mut |_, mut a| {
                    if k == t {
                        a.as_slice_mut().unwrap()[e] += d;
                    }
                    k += 1;
                });
                mean_loss_and_gradient(&m, &scans, 2.5).unwrap().0
            };
            let (up, down) = (loss_at(eps), loss_at(-eps));
            // Unequal one-sided slopes mean a max-pool switch inside the
            // stencil; the function is not differentiable there.
            let (right, left) = ((up - base) / eps, (base - down) / eps);
            if (right - left).abs() > 1e-5 * right.abs().max(left.abs()).max(1e-7) {
                continue;
            }
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (fd - g[e]).abs() <= 1e-4 * fd.abs().max(g[e].abs()).max(1e-7),
                "{name}[{e}]: {fd} vs {}",
                g[e]
            );
            checked += 1;
            if checked == g.len().min(2) {
                break;
            }
        }
        assert_eq!(checked, g.len().min(2), "{name}: no smooth entries");
    }
}

#[test]
fn training_learns_a_separable_toy_task_and_selects_the_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = toy_set(0..24);
    let val_set = toy_set(100..112);
    let cfg = fast_config(1);
    let (model, log) = train(desk_model(0), &train_set, &val_set, &cfg, Some(dir.path())).unwrap();

    assert!(log.stopped_epoch <= cfg.max_epochs);
    assert!(log.selected_epoch <= log.stopped_epoch);
    let best = log.epochs.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
    let first_best = log.epochs.iter().position(|e| e.val_accuracy == best).unwrap() + 1;
    assert_eq!(log.selected_epoch, first_best);
    assert!(best >= 0.9, "validation accuracy {best}: {:#?}", log.epochs);
    assert_eq!(log.pos_weight, 16.0 / 8.0);
    assert_eq!(log.train_examples_by_modality[&Modality::Standard], 24);

    // The returned parameters are the selected epoch's: re-evaluating reproduces its accuracy.
    let acc = evaluate(&model, &val_set, log.pos_weight).unwrap().accuracy;
    assert_eq!(acc, best);

    let text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), log.epochs.len() + 1);
    assert_eq!(lines.last().unwrap()["type"], "summary");
    assert_eq!(lines.last().unwrap()["selected_epoch"], log.selected_epoch);
    let selected = crate::model::load_model(&dir.path().join("selected.ckpt"), &model.config).unwrap();
    assert_eq!(selected, model);
    assert!(dir
        .path()
        .join(format!("epoch-{:03}.ckpt", log.selected_epoch))
        .exists());
}

#[test]
fn equal_seeds_give_equal_logs_and_parameters() {
    let train_set = toy_set(0..9);
    let val_set = toy_set(50..54);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..fast_config(7)
    };
    let (m1, l1) = train(desk_model(2), &train_set, &val_set, &cfg, None).unwrap();
    let (m2, l2) = train(desk_model(2), &train_set, &val_set, &cfg, None).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
    let other = TrainConfig { seed: 8, ..cfg };
    let (_, l3) = train(desk_model(2), &train_set, &val_set, &other, None).unwrap();
    assert_ne!(l1.epochs, l3.epochs);
}

#[test]
fn training_rejects_empty_and_single_class_data() {
    let val_set = toy_set(0..3);
    assert!(matches!(
        train(desk_model(0), &[], &val_set, &fast_config(0), None),
        Err(TrainingError::EmptyData(_))
    ));
    let negatives: Vec<Example> = toy_set(0..6).into_iter().filter(|e| !e.is_positive()).collect();
    assert!(matches!(
        train(desk_model(0), &negatives, &val_set, &fast_config(0), None),
        Err(TrainingError::ClassImbalance { positives: 0, .. })
    ));
    let manual = TrainConfig {
        pos_weight_mode: PosWeightMode::Manual,
        pos_weight: Some(1.0),
        max_epochs: 1,
        ..fast_config(0)
    };
    let (_, log) = train(desk_model(0), &negatives, &val_set, &manual, None).unwrap();
    assert_eq!(log.pos_weight, 1.0);
}

/// Writes toy studies as volume files and returns a manifest over them.
fn toy_manifest(root: &Path) -> DatasetManifest {
    let mut records = Vec::new();
    for i in 0..16 {
        let modality = if i % 2 == 0 {
            Modality::Arthrogram
        } else {
            Modality::Standard
        };
        let positive = i % 4 < 2;
        let mut scan = toy_scan(i, positive, modality);
        scan.meta.study_id = format!("st{i}");
        let rel = format!("st{i}/sag.mvol");
        fs::create_dir_all(root.join(format!("st{i}"))).unwrap();
        crate::data::write_volume(&scan, root.join(&rel)).unwrap();
        let mut r = record(
            &format!("st{i}"),
            &format!("p{i}"),
            Label::from_positive(positive),
            modality,
        );
        r.series[0].path = rel.into();
        r.series[0].view = View::Sagittal;
        r.split = if i < 12 { Split::Train } else { Split::Val };
        records.push(r);
    }
    DatasetManifest::new(records).unwrap()
}

#[test]
fn staged_training_filters_the_finetune_modality() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path());
    let data = || StageData {
        manifest: &manifest,
        root: dir.path(),
        view: View::Sagittal,
        preprocessor: None,
        augmentation: None,
        augmented_files: &[],
    };
    let cfg = TrainConfig {
        max_epochs: 2,
        ..fast_config(0)
    };
    let out = dir.path().join("runs");
    let (_, logs) = run_staged_training(
        EncoderConfig::desk_scale(8, 0),
        Some((data(), &cfg)),
        (data(), &cfg),
        Modality::Arthrogram,
        Some(&out),
    )
    .unwrap();
    assert_eq!(logs.len(), 2);
    assert_eq!(logs[0].stage, Stage::Pretrain);
    assert_eq!(logs[0].train_examples, 12);
    assert_eq!(logs[1].stage, Stage::Finetune);
    assert_eq!(
        logs[1].train_examples_by_modality.keys().collect::<Vec<_>>(),
        vec![&Modality::Arthrogram]
    );
    assert_eq!(logs[1].train_examples, 6);
    assert!(out.join("pretrain/selected.ckpt").exists());
    assert!(out.join("finetune/selected.ckpt").exists());

    // Finetuning alone is a valid composition.
    let (_, logs) = run_staged_training(
        EncoderConfig::desk_scale(8, 0),
        None,
        (data(), &cfg),
        Modality::Standard,
        None,
    )
    .unwrap();
    assert_eq!(logs.len(), 1);

    let only_mra = manifest.filter_modality(Modality::Arthrogram);
    let missing = StageData {
        manifest: &only_mra,
        ..data()
    };
    assert!(matches!(
        run_staged_training(
            EncoderConfig::desk_scale(8, 0),
            None,
            (missing, &cfg),
            Modality::Standard,
            None
        ),
        Err(TrainingError::EmptyData(_))
    ));
}

#[test]
fn staged_runs_with_equal_seeds_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path());
    let cfg = TrainConfig {
        max_epochs: 2,
        ..fast_config(4)
    };
    let run = |name: &str| {
        let out = dir.path().join(name);
        let data = StageData {
            manifest: &manifest,
            root: dir.path(),
            view: View::Sagittal,
            preprocessor: None,
            augmentation: Some(AugmentationConfig {
                copies_per_scan: 2,
                ..Default::default()
            }),
            augmented_files: &[],
        };
        run_staged_training(
            EncoderConfig::desk_scale(8, 1),
            None,
            (data, &cfg),
            Modality::Standard,
            Some(&out),
        )
        .unwrap();
        fs::read(out.join("finetune/selected.ckpt")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
