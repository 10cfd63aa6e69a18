//! End-to-end training behaviour on synthetic scenes.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device};
use convseg_core::synthetic::{write_dataset, SceneSpec};
use convseg_core::{binary_iou, rle_decode, DatasetManifest};
use convseg_net::{
    evaluate_predictions, predict_dataset, train_phase, Checkpoint, DataGroup, GroupId, ModelConfig, NetError,
    ParamGroup, Phase, Scale, SegModel, TrainConfig, TrainOptions,
};

fn synthetic(dir: &Path, images: usize, spec: &SceneSpec, seed: u64) -> DatasetManifest {
    write_dataset(dir, images, spec, seed).unwrap().0
}

fn literal(manifest: DatasetManifest) -> Vec<DataGroup> {
    vec![DataGroup::new(GroupId::Literal, manifest).unwrap()]
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        lr_peak: 3e-3,
        lr_min: 1e-4,
        warmup_steps: 20,
        total_steps: 300,
        batch_size: 4,
        grad_accum: 1,
        weight_decay: 0.0,
        seed: 3,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn mean_train_iou(model: &SegModel, manifest: &DatasetManifest) -> f64 {
    let mut total = 0.0;
    for s in &manifest.samples {
        let image = convseg_net::preprocess::load_rgb(Path::new(&s.image.uri)).unwrap();
        let pred = model.predict(&image, &s.prompt).unwrap().threshold(0.5);
        total += binary_iou(&pred, &rle_decode(&s.mask).unwrap()).unwrap();
    }
    total / manifest.len() as f64
}

#[test]
fn tiny_model_overfits_eight_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        width: 64,
        height: 64,
        objects: 2,
        min_side: 24,
        max_side: 34,
    };
    let all = synthetic(dir.path(), 6, &spec, 11);
    let manifest = DatasetManifest::new(all.samples[..8].to_vec());
    let model = SegModel::new(ModelConfig::tiny(), DType::F32, Device::Cpu).unwrap();
    let start = Instant::now();
    let out = train_phase(&model, &overfit_config(), &literal(manifest.clone()), TrainOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let iou = mean_train_iou(&model, &manifest);
    let last = out.log.iter().rfind(|r| r.category == "all").unwrap();
    eprintln!("mean IoU {iou:.4}, final loss {:.4}, {:.1}s", last.loss, elapsed.as_secs_f64());
    assert!(iou >= 0.9, "mean train IoU {iou}");
    assert!(elapsed.as_secs() < 300);

    let preds = predict_dataset(&model, &manifest, 0.5, None, "overfit");
    assert_eq!(preds.entries.len(), 8);
    let report = evaluate_predictions(&preds, &manifest).unwrap();
    assert!(report.with_negatives.overall_giou >= 90.0, "{}", report.with_negatives.overall_giou);

    let empty = predict_dataset(&model, &manifest, 1.01, None, "overfit");
    assert!(empty.entries.values().all(|m| m.foreground_count() == 0));
}

fn short_config() -> TrainConfig {
    TrainConfig {
        lr_peak: 1e-3,
        lr_min: 1e-5,
        warmup_steps: 2,
        total_steps: 6,
        batch_size: 2,
        grad_accum: 2,
        seed: 5,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

fn small_scenes(dir: &Path) -> DatasetManifest {
    synthetic(dir, 3, &SceneSpec::default(), 2)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let groups = literal(small_scenes(&dir.path().join("img")));
    let cfg = short_config();

    let straight = SegModel::new(ModelConfig::tiny(), DType::F32, Device::Cpu).unwrap();
    let full = train_phase(&straight, &cfg, &groups, TrainOptions::default()).unwrap();

    let out = dir.path().join("run");
    let interrupted = SegModel::new(ModelConfig::tiny(), DType::F32, Device::Cpu).unwrap();
    let first = train_phase(
        &interrupted,
        &cfg,
        &groups,
        TrainOptions {
            out_dir: Some(out.clone()),
            stop_after: Some(3),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(first.checkpoint.meta.step, 3);
    assert!(out.join("checkpoint-0000002.ckpt").exists());

    // a fresh process: new model, state only from disk
    let resumed = SegModel::new(ModelConfig::tiny(), DType::F32, Device::Cpu).unwrap();
    let ck = Checkpoint::load(&out.join("final.ckpt")).unwrap();
    let second = train_phase(
        &resumed,
        &cfg,
        &groups,
        TrainOptions {
            out_dir: Some(out.clone()),
            resume: Some(ck),
            ..TrainOptions::default()
        },
    )
    .unwrap();

    let mut stitched = first.log.clone();
    stitched.extend(second.log.clone());
    assert_eq!(stitched, full.log);
    for name in straight.params().names() {
        assert_eq!(
            straight.params().values_f64(&name).unwrap(),
            resumed.params().values_f64(&name).unwrap(),
            "{name}"
        );
    }
    let csv = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(csv, convseg_net::loss_log_csv(&full.log));
}

#[test]
fn full_scale_mode_updates_only_trainable_groups() {
    let dir = tempfile::tempdir().unwrap();
    let groups = literal(small_scenes(dir.path()));
    let model_cfg = ModelConfig {
        scale: Scale::Full,
        ..ModelConfig::tiny()
    };
    let model = SegModel::new(model_cfg, DType::F32, Device::Cpu).unwrap();
    let names = model.params().names();
    let before: Vec<Vec<f64>> = names.iter().map(|n| model.params().values_f64(n).unwrap()).collect();
    let cfg = TrainConfig {
        total_steps: 1,
        warmup_steps: 0,
        grad_accum: 1,
        ..short_config()
    };
    train_phase(&model, &cfg, &groups, TrainOptions::default()).unwrap();

    let mut changed = std::collections::BTreeSet::new();
    for (name, old) in names.iter().zip(&before) {
        let group = model.params().get(name).unwrap().group;
        let new = model.params().values_f64(name).unwrap();
        let frozen = matches!(group, ParamGroup::ImageEncoder | ParamGroup::PromptBase);
        if frozen {
            let same = old.iter().zip(&new).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "frozen parameter {name} changed");
        } else if old != &new {
            changed.insert(format!("{group:?}"));
        }
    }
    let expected: std::collections::BTreeSet<String> =
        ["PromptLora", "Adapter", "Decoder"].iter().map(|s| s.to_string()).collect();
    assert_eq!(changed, expected);
}

#[test]
fn phase_two_requires_a_phase_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_scenes(dir.path());
    let mut negative = manifest.samples[0].clone();
    negative.sample_id = "neg".into();
    negative.prompt = "segment the purple triangle".into();
    negative.mask = convseg_core::MaskRle::empty(negative.mask.height(), negative.mask.width());
    negative.is_negative = true;
    let groups = vec![
        DataGroup::new(GroupId::Literal, manifest.clone()).unwrap(),
        DataGroup::new(GroupId::ConversationalPos, manifest.clone()).unwrap(),
        DataGroup::new(GroupId::ConversationalNeg, DatasetManifest::new(vec![negative])).unwrap(),
    ];
    let model = SegModel::new(ModelConfig::tiny(), DType::F32, Device::Cpu).unwrap();
    let cfg = TrainConfig {
        phase: Phase::Conversational,
        ..short_config()
    };
    let err = train_phase(&model, &cfg, &groups, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, NetError::Training(_)), "{err}");

    let p1 = train_phase(
        &model,
        &TrainConfig {
            total_steps: 2,
            warmup_steps: 1,
            ..short_config()
        },
        &groups[..1],
        TrainOptions::default(),
    )
    .unwrap();
    let p2 = train_phase(
        &model,
        &TrainConfig {
            total_steps: 2,
            warmup_steps: 1,
            ..cfg
        },
        &groups,
        TrainOptions {
            init: Some(p1.checkpoint),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(p2.checkpoint.meta.phase, Some(Phase::Conversational));
    assert!(p2.log.iter().any(|r| r.category == "all"));
}
