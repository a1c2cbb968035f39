mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::*;

const CONFIG: &str = r#"
annotations = "annotations.json"
terms = "terms.json"
seed = 4

[detector]
kind = "mock"
script = "mock.json"
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groundalign"))
        .args(args)
        .arg("--workdir")
        .arg(dir)
        .env_remove("GROUNDALIGN_DETECTOR_URL")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn workspace() -> Workspace {
    let ws = reference_subset_workspace(4, 0.7, |r| [5, 13, 18].contains(&r.0));
    fs::write(ws.path().join("config.toml"), CONFIG).unwrap();
    ws
}

#[test]
fn full_workflow() {
    let ws = workspace();
    let dir = ws.path();

    let table = ok(&run(&dir, &["align", "--config", "config.toml"]));
    assert!(table.contains("small kick scooter"), "{table}");
    let selection = read(dir.join("selection.json"));
    let chosen: Vec<&str> = selection["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["best"]["text"].as_str().unwrap())
        .collect();
    assert_eq!(
        chosen,
        ["large cargo box on the trailer", "small kick scooter", "indicator warning board with wooden frame"]
    );
    assert!(dir.join("alignment_report.md").is_file());
    assert_eq!(read(dir.join("align_manifest.json"))["seed"], 4);

    let summary = ok(&run(&dir, &["gen-pseudo", "--config", "config.toml"]));
    assert!(summary.contains("pseudo labels"), "{summary}");
    let labels = read(dir.join("pseudo/pseudo_labels.json"));
    assert_eq!(labels["labels"].as_array().unwrap().len(), 12);
    assert!(dir.join("pseudo/dataset.json").is_file());

    let log = ok(&run(&dir, &["iterate", "--config", "config.toml", "--max-iterations", "2", "--holdout-fraction", "0.2"]));
    assert_eq!(log.lines().count(), 3, "{log}");
    let manifest = read(dir.join("iterations/manifest.json"));
    assert_eq!(manifest["final_model"]["id"], "m2");
    assert_eq!(manifest["history"].as_array().unwrap().len(), 3);
    for k in 0..3 {
        assert!(dir.join(format!("iterations/iter_{k}/dataset.json")).is_file());
    }

    // Score the one-shot detections against the labeled annotations.
    let text = ok(&run(&dir, &[
        "eval", "--results", "pseudo/detections.json", "--gt", "annotations.json", "--iou", "0.5",
        "--out", "eval_single",
    ]));
    assert!(text.contains("mAP"), "{text}");
    let report = read(dir.join("eval_single.json"));
    assert_eq!(report["iou_thresholds"], serde_json::json!([0.5]));

    let out = ok(&run(&dir, &["report", "--selection", "selection.json", "--out", "again"]));
    assert_eq!(out, fs::read_to_string(dir.join("alignment_report.md")).unwrap());

    fs::write(dir.join("cmp.json"), r#"[{"method":"zero-shot","map":20.5},{"method":"aligned","map":31.25}]"#).unwrap();
    let out = ok(&run(&dir, &["report", "--comparison", "cmp.json"]));
    assert!(out.contains("| aligned   | 31.25 |"), "{out}");
}

#[test]
fn subprocess_detector_from_the_command_line() {
    let ws = workspace();
    let dir = ws.path();
    let cmd = format!("{} mock-detector --script mock.json", env!("CARGO_BIN_EXE_groundalign"));
    let out = run(&dir, &[
        "align", "--annotations", "annotations.json", "--terms", "terms.json", "--seed", "4",
        "--detector-cmd", &cmd,
    ]);
    ok(&out);
    let via_flag = read(dir.join("selection.json"));
    ok(&run(&dir, &["align", "--config", "config.toml"]));
    assert_eq!(via_flag["results"], read(dir.join("selection.json"))["results"]);
}

#[test]
fn exit_codes() {
    let ws = workspace();
    let dir = ws.path();

    // configuration problems
    assert_eq!(run(&dir, &["align"]).status.code(), Some(2));
    assert_eq!(run(&dir, &["align", "--config", "config.toml", "--eta", "1.5"]).status.code(), Some(2));
    fs::write(dir.join("results.json"), "[]").unwrap();
    let bad_iou = run(&dir, &["eval", "--results", "results.json", "--gt", "annotations.json", "--iou", "0.9:0.5"]);
    assert_eq!(bad_iou.status.code(), Some(2));

    // detector failures
    let dead = run(&dir, &["align", "--config", "config.toml", "--detector-cmd", "false"]);
    assert_eq!(dead.status.code(), Some(3), "{}", String::from_utf8_lossy(&dead.stderr));

    // data integrity
    fs::write(dir.join("broken.json"), r#"{"images":[],"annotations":[{"image_id":1,"category_id":1,"bbox":[0,0,1,1]}],"categories":[]}"#).unwrap();
    let broken = run(&dir, &["align", "--config", "config.toml", "--annotations", "broken.json"]);
    assert_eq!(broken.status.code(), Some(4));
    let stray = run(&dir, &["eval", "--results", "results.json", "--gt", "broken.json"]);
    assert_eq!(stray.status.code(), Some(4));
}

#[test]
fn finetune_failure_aborts_with_partial_history() {
    let ws = workspace();
    let dir = ws.path();
    let mut script = read(dir.join("mock.json"));
    script["fail_finetune_from_stage"] = 1.into();
    fs::write(dir.join("mock.json"), script.to_string()).unwrap();
    let out = run(&dir, &["iterate", "--config", "config.toml", "--expressions", "classnames", "--max-iterations", "3"]);
    assert_eq!(out.status.code(), Some(3));
    let manifest = read(dir.join("iterations/manifest.json"));
    assert_eq!(manifest["history"].as_array().unwrap().len(), 2);
    assert!(manifest["aborted"].as_str().unwrap().contains("scripted failure"));
    assert!(dir.join("iterate_manifest.json").is_file());
}
