//! End-to-end command runs through `dispatch`, checking exit codes and files.

use std::path::Path;

use convseg_cli::dispatch;
use convseg_core::synthetic::{write_dataset, SceneSpec};
use convseg_core::{load_manifest, save_manifest, DatasetManifest};
use serde_json::json;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("convseg").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scenes(dir: &Path, n: usize) -> DatasetManifest {
    let spec = SceneSpec {
        width: 64,
        height: 48,
        objects: 3,
        min_side: 10,
        max_side: 18,
    };
    write_dataset(dir, n, &spec, 4).unwrap().0
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["engine", "run", "--images", "x", "--colour"]), 2);
    assert_eq!(run(&["dataset", "stats"]), 2);
    assert_eq!(run(&["train", "--phase", "3"]), 2);
    assert_eq!(run(&["serve", "--out", "x"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn phase_two_without_init_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.jsonl");
    save_manifest(&scenes(&dir.path().join("img"), 1), &m).unwrap();
    assert_eq!(run(&["train", "--phase", "2", "--manifest", p(&m), "--out", p(&dir.path().join("t"))]), 2);
    assert!(!dir.path().join("t/final.ckpt").exists());
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, json!({"engine": {"workerz": 2}}).to_string()).unwrap();
    let images = dir.path().join("img");
    scenes(&images, 1);
    let code = run(&["engine", "run", "--images", p(&images), "--config", p(&cfg), "--fixtures", "--out", p(&dir.path().join("o"))]);
    assert_eq!(code, 2);
    std::fs::write(&cfg, "{not json").unwrap();
    assert_eq!(run(&["dataset", "synth", "--out", p(&dir.path().join("s")), "--config", p(&cfg)]), 2);
}

#[test]
fn engine_run_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img");
    scenes(&images, 3);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, json!({"seed": 5, "engine": {"workers": 2}}).to_string()).unwrap();
    let out = dir.path().join("deep/nested/out");
    let code = run(&["engine", "run", "--images", p(&images), "--config", p(&cfg), "--out", p(&out), "--fixtures"]);
    assert_eq!(code, 0);
    for f in ["manifest.jsonl", "audit.jsonl", "summary.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read(out.join("manifest.jsonl")).unwrap();
    assert!(!load_manifest(out.join("manifest.jsonl")).unwrap().is_empty());
    assert_eq!(run(&["engine", "resume", "--out", p(&out)]), 0);
    assert_eq!(std::fs::read(out.join("manifest.jsonl")).unwrap(), manifest);

    assert_eq!(run(&["dataset", "stats", "--manifest", p(&out.join("manifest.jsonl"))]), 0);
    assert_eq!(run(&["dataset", "stats", "--manifest", p(&dir.path().join("missing.jsonl"))]), 1);
    assert_eq!(run(&["engine", "resume", "--out", p(&dir.path().join("nothing"))]), 1);
    assert_eq!(run(&["engine", "run", "--images", p(&images), "--out", p(&out)]), 2);
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = scenes(&data, 2);
    let m = dir.path().join("m.jsonl");
    save_manifest(&manifest, &m).unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        json!({"train": {"total_steps": 2, "warmup_steps": 1, "batch_size": 1, "grad_accum": 1, "checkpoint_every": 0}})
            .to_string(),
    )
    .unwrap();

    let p1 = dir.path().join("p1");
    assert_eq!(run(&["train", "--config", p(&cfg), "--phase", "1", "--manifest", p(&m), "--out", p(&p1), "--seed", "3"]), 0);
    assert!(p1.join("final.ckpt").exists());
    assert!(p1.join("loss_log.csv").exists());
    let resolved: serde_json::Value = serde_json::from_slice(&std::fs::read(p1.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], 3);
    assert_eq!(resolved["model"]["init_seed"], 3);

    // phase 2 needs negatives: add one empty-mask sample
    let mut with_neg = manifest.clone();
    let mut neg = manifest.samples[0].clone();
    neg.sample_id = "neg-0".into();
    neg.prompt = "segment the purple giraffe".into();
    neg.mask = convseg_core::MaskRle::empty(neg.mask.height(), neg.mask.width());
    neg.is_negative = true;
    with_neg.samples.push(neg);
    let conv = dir.path().join("conv.jsonl");
    save_manifest(&with_neg, &conv).unwrap();
    let p2 = dir.path().join("p2");
    let lit = format!("literal={}", p(&m));
    let code = run(&[
        "train", "--config", p(&cfg), "--phase", "2", "--manifest", &lit, "--manifest", p(&conv),
        "--init-checkpoint", p(&p1.join("final.ckpt")), "--out", p(&p2),
    ]);
    assert_eq!(code, 0);

    let ev = dir.path().join("ev");
    let ck = p2.join("final.ckpt");
    assert_eq!(run(&["eval", "--checkpoint", p(&ck), "--manifest", p(&m), "--out", p(&ev), "--threshold", "0.5"]), 0);
    for f in ["predictions.jsonl", "report.json", "report.txt"] {
        assert!(ev.join(f).exists(), "{f}");
    }
    let rep = dir.path().join("rep");
    assert_eq!(run(&["report", "--predictions", p(&ev.join("predictions.jsonl")), "--manifest", p(&m), "--out", p(&rep)]), 0);
    assert_eq!(std::fs::read(rep.join("report.json")).unwrap(), std::fs::read(ev.join("report.json")).unwrap());
}

#[test]
fn convert_coco_writes_a_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("instances.json");
    let coco = json!({
        "images": [{"id": 1, "file_name": "x.jpg", "width": 8, "height": 6}],
        "categories": [{"id": 3, "name": "cup"}],
        "annotations": [{"id": 10, "image_id": 1, "category_id": 3, "iscrowd": 0,
                          "segmentation": [[1.0, 1.0, 5.0, 1.0, 5.0, 4.0, 1.0, 4.0]]}]
    });
    std::fs::write(&ann, coco.to_string()).unwrap();
    let out = dir.path().join("m/out.jsonl");
    let code = run(&[
        "dataset", "convert-coco", "--annotations", p(&ann), "--images", "imgs", "--out", p(&out), "--split",
        "human_annotated",
    ]);
    assert_eq!(code, 0);
    let m = load_manifest(&out).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m.samples[0].prompt, "the cup");
    assert_eq!(m.samples[0].mask.foreground_count(), 12);
    assert_eq!(run(&["dataset", "convert-coco", "--annotations", p(&ann), "--images", "i", "--out", p(&out), "--split", "dev"]), 2);
}

#[test]
fn synth_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    assert_eq!(run(&["dataset", "synth", "--out", p(&out), "--count", "2", "--seed", "9"]), 0);
    let manifest = load_manifest(out.join("manifest.jsonl")).unwrap();
    manifest.validate().unwrap();
    assert!(!manifest.is_empty());
    assert!(manifest.samples.iter().all(|s| Path::new(&s.image.uri).exists()));
}

#[test]
fn image_uris_resolve_against_the_manifest_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut manifest = scenes(&data.join("img"), 1);
    for s in &mut manifest.samples {
        s.image.uri = Path::new(&s.image.uri).strip_prefix(&data).unwrap().to_string_lossy().into_owned();
    }
    let m = data.join("m.jsonl");
    save_manifest(&manifest, &m).unwrap();
    let cfg = dir.path().join("c.json");
    let steps = json!({"train": {"total_steps": 1, "warmup_steps": 0, "batch_size": 1, "grad_accum": 1, "checkpoint_every": 0}});
    std::fs::write(&cfg, steps.to_string()).unwrap();

    let p1 = dir.path().join("p1");
    assert_eq!(run(&["train", "--config", p(&cfg), "--phase", "1", "--manifest", p(&m), "--out", p(&p1)]), 0);
    let ck = p1.join("final.ckpt");
    let ev = dir.path().join("ev");
    assert_eq!(run(&["eval", "--checkpoint", p(&ck), "--manifest", p(&m), "--out", p(&ev)]), 0);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["prediction_errors"], 0);

    // with the images gone every prediction fails, which is an error
    std::fs::remove_dir_all(data.join("img")).unwrap();
    assert_eq!(run(&["eval", "--checkpoint", p(&ck), "--manifest", p(&m), "--out", p(&ev)]), 1);
}
