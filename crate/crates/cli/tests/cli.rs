use std::path::Path;
use std::process::{Command, Output};

fn affpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affpipe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("error object on stderr");
    serde_json::from_str(line).expect("valid JSON")
}

fn fixture(dir: &Path, subjects: usize, frames: usize) {
    let out = affpipe(&[
        "fixture",
        "--out",
        dir.to_str().unwrap(),
        "--subjects",
        &subjects.to_string(),
        "--frames-per-subject",
        &frames.to_string(),
        "--side",
        "64",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_every_subcommand() {
    let out = affpipe(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["ingest", "summarize", "preprocess", "split", "features", "train", "run", "report", "explain"] {
        assert!(text.contains(sub), "missing {sub} in:\n{text}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(affpipe(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_manifest_reports_code_and_exit_status() {
    let out = affpipe(&["summarize", "/nonexistent/manifest.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["code"], "MISSING_FILE");
}

#[test]
fn summarize_counts_fixture_frames() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 3, 4);
    let out = affpipe(&["summarize", dir.path().join("manifest.jsonl").to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n_frames"], 12);
    assert_eq!(v["n_subjects"], 3);
    assert_eq!(v["n_frames_by_label"]["positive"], 6);
    assert_eq!(v["n_frames_by_label"]["negative"], 6);
}

#[test]
fn split_rejects_too_many_subjects() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 3, 2);
    let out = affpipe(&[
        "split",
        "--manifest",
        dir.path().join("manifest.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("split.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["code"], "INSUFFICIENT_SUBJECTS");
}

/// fixture → preprocess → split → features → train → explain, then explain
/// against different weights.
#[test]
fn pipeline_stages_chain_and_explain_checks_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    fixture(d, 2, 2);

    let out = affpipe(&["preprocess", "--manifest", &p("manifest.jsonl"), "--boxes", &p("boxes.jsonl"), "--out", &p("crops")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d.join("crops/crops.jsonl")).unwrap().lines().count(), 4);

    let out = affpipe(&[
        "split",
        "--manifest",
        &p("manifest.jsonl"),
        "--train-subjects",
        "1",
        "--test-subjects",
        "1",
        "--out",
        &p("split.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let descriptor: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(descriptor["n_train_frames"].as_u64().unwrap() + descriptor["n_test_frames"].as_u64().unwrap(), 4);

    let out = affpipe(&[
        "features",
        "--backbone",
        "sup-vit-s16",
        "--weights",
        "synthetic:1",
        "--crops",
        &p("crops"),
        "--out",
        &p("features.csv"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("features.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    std::fs::write(
        d.join("config.toml"),
        "output_dir = \"run\"\n\
         [dataset]\nmanifest = \"manifest.jsonl\"\nboxes = \"boxes.jsonl\"\n\
         [[backbones]]\nid = \"sup-vit-s16\"\nweights = \"synthetic:1\"\n\
         [optimizer.vision_transformer]\nlearning_rate = 5e-6\nepochs = 3\n\
         [training]\naugmentation_views = 1\n",
    )
    .unwrap();
    let out = affpipe(&[
        "train",
        "--backbone",
        "sup-vit-s16",
        "--manifest",
        &p("manifest.jsonl"),
        "--split",
        &p("split.json"),
        "--config",
        &p("config.toml"),
        "--out",
        &p("probe.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d.join("probe.curve.csv")).unwrap().lines().count(), 4);

    let frame = "dog01-pos-f00000";
    let explain = |weights: &str, out_dir: &str| {
        affpipe(&[
            "explain",
            "--ckpt",
            &p("probe.json"),
            "--backbone",
            "sup-vit-s16",
            "--weights",
            weights,
            "--crops",
            &p("crops"),
            "--frames",
            frame,
            "--out",
            &p(out_dir),
        ])
    };
    let out = explain("synthetic:1", "saliency");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("saliency/contact_sheet.png").is_file());
    assert!(d.join(format!("saliency/{frame}.png")).is_file());

    let out = explain("synthetic:2", "saliency2");
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["code"], "CHECKSUM_MISMATCH");
}
