use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_firerescore"))
        .args(args)
        .output()
        .expect("spawn firerescore")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_string_lossy().into_owned()
}

fn synth(dir: &Path, images: &str) -> String {
    let o = run(&[
        "synth",
        "--seed",
        "7",
        "--images",
        images,
        "--out",
        &p(dir, "corpus"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    p(dir, "corpus/manifest.json")
}

#[test]
fn synth_writes_manifest_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "12");
    let text = fs::read_to_string(&manifest).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["images"].as_array().unwrap().len(), 12);
    let first = fs::read(dir.path().join("corpus/detections/scene_00003.jsonl")).unwrap();
    synth(dir.path(), "12");
    assert_eq!(
        fs::read(dir.path().join("corpus/detections/scene_00003.jsonl")).unwrap(),
        first
    );
}

#[test]
fn missing_required_flag_is_usage_error() {
    let o = run(&["synth", "--images", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn unknown_method_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "2");
    let o = run(&[
        "baseline",
        "--manifest",
        &manifest,
        "--method",
        "xyz",
        "--out",
        &p(dir.path(), "x.jsonl"),
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for name in ["nms", "soft-nms", "ebf", "cbf", "hbcf", "scf"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn every_baseline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "4");
    for m in ["nms", "soft-nms", "ebf", "cbf", "hbcf", "scf"] {
        let out = p(dir.path(), &format!("{m}.jsonl"));
        let o = run(&[
            "baseline",
            "--manifest",
            &manifest,
            "--method",
            m,
            "--out",
            &out,
        ]);
        assert_eq!(code(&o), 0, "{m}: {}", stderr(&o));
        assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 4);
    }
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.toml");
    fs::write(&cfg, "[train]\nlearnin_rate = 0.1\n").unwrap();
    let o = run(&[
        "--config",
        &cfg,
        "synth",
        "--images",
        "1",
        "--out",
        &p(dir.path(), "c"),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learnin_rate"));
}

#[test]
fn config_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.toml");
    fs::write(&cfg, "[synth]\npasses = 2\nseed = 3\n").unwrap();
    let o = run(&[
        "--config",
        &cfg,
        "synth",
        "--images",
        "1",
        "--out",
        &p(dir.path(), "a"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dets = fs::read_to_string(dir.path().join("a/detections/scene_00000.jsonl")).unwrap();
    assert_eq!(dets.lines().count(), 2);
    let o = run(&[
        "--config",
        &cfg,
        "synth",
        "--images",
        "1",
        "--passes",
        "4",
        "--out",
        &p(dir.path(), "b"),
    ]);
    assert_eq!(code(&o), 0);
    let dets = fs::read_to_string(dir.path().join("b/detections/scene_00000.jsonl")).unwrap();
    assert_eq!(dets.lines().count(), 4);
}

#[test]
fn train_requires_labels_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "3");
    let feats = p(dir.path(), "f.csv");
    let o = run(&["extract", "--manifest", &manifest, "--out", &feats]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!fs::read_to_string(&feats)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .contains("label"));
    let o = run(&[
        "train",
        "--features",
        &feats,
        "--out",
        &p(dir.path(), "m.json"),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let empty = p(dir.path(), "empty.csv");
    fs::write(&empty, "image_id,det_index,class,c,var,s,e,t,label\n").unwrap();
    let o = run(&[
        "train",
        "--features",
        &empty,
        "--out",
        &p(dir.path(), "m.json"),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupt_image_is_runtime_error_naming_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "3");
    fs::write(dir.path().join("corpus/images/scene_00002.ppm"), b"garbage").unwrap();
    let o = run(&[
        "extract",
        "--manifest",
        &manifest,
        "--out",
        &p(dir.path(), "f.csv"),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("scene_00002"), "{}", stderr(&o));
}

#[test]
fn pipeline_end_to_end_with_threshold_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "10");
    let feats = p(dir.path(), "f.csv");
    let model = p(dir.path(), "m.json");
    assert_eq!(
        code(&run(&[
            "extract",
            "--manifest",
            &manifest,
            "--with-labels",
            "--out",
            &feats
        ])),
        0
    );
    assert!(fs::read_to_string(&feats)
        .unwrap()
        .starts_with("image_id,det_index,class,c,var,s,e,t,label\n"));
    let o = run(&[
        "train",
        "--features",
        &feats,
        "--out",
        &model,
        "--epochs",
        "20",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(format!("{model}.log.csv"))
        .unwrap()
        .starts_with("epoch,train_bce,val_bce"));

    let kept = |tau: &str| -> (usize, usize) {
        let out = p(dir.path(), &format!("r{tau}.jsonl"));
        let o = run(&[
            "rescore",
            "--manifest",
            &manifest,
            "--model",
            &model,
            "--tau",
            tau,
            "--out",
            &out,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = fs::read_to_string(&out).unwrap();
        let mut total = 0;
        let mut kept = 0;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for b in v["boxes"].as_array().unwrap() {
                total += 1;
                assert!(b["conf"].is_number() && b["refined_conf"].is_number());
                kept += usize::from(b["kept"].as_bool().unwrap());
            }
        }
        (kept, total)
    };
    let (all, total) = kept("0");
    assert!(total > 0);
    assert_eq!(all, total);
    assert_eq!(kept("1").0, 0);
    let (k, t) = kept("0.5");
    assert!(k <= t);

    let csv = p(dir.path(), "report.csv");
    let o = run(&[
        "eval",
        "--manifest",
        &manifest,
        "--run",
        "raw",
        "--run",
        &format!("crn={}", p(dir.path(), "r0.5.jsonl")),
        "--csv",
        &csv,
        "--bench",
        &model,
        "--bench-reps",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("mAP@50"));
    assert!(lines[2].starts_with("crn,") && !lines[2].ends_with(','));
    assert!(stdout_has_metrics(&o));
}

fn stdout_has_metrics(o: &Output) -> bool {
    String::from_utf8_lossy(&o.stdout).contains("Recall @ IOU = 0.5")
}

#[test]
fn eval_bad_run_spec_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "2");
    assert_eq!(
        code(&run(&["eval", "--manifest", &manifest, "--run", "crn"])),
        2
    );
    assert_eq!(
        code(&run(&["eval", "--manifest", &manifest, "--mode", "zero"])),
        2
    );
    let o = run(&[
        "eval",
        "--manifest",
        &manifest,
        "--run",
        &format!("x={}", p(dir.path(), "missing.jsonl")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_rejects_unknown_class() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "1");
    let dets = p(dir.path(), "d.jsonl");
    fs::write(
        &dets,
        "{\"image_id\":\"scene_00000\",\"pass\":0,\"boxes\":[{\"class\":5,\"x_min\":0,\"y_min\":0,\"x_max\":5,\"y_max\":5,\"conf\":0.5}]}\n",
    )
    .unwrap();
    let o = run(&[
        "eval",
        "--manifest",
        &manifest,
        "--run",
        &format!("x={dets}"),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("class 5"), "{}", stderr(&o));
}
