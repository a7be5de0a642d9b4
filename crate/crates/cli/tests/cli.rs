use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
image_size = 16
scenes = 6
classes = 2
epochs = 1
encoder_channels = [3, 4, 4]
key_dim = 4
segmenter_epochs = 1
crop = { mode = "grid", side = 2 }

[scene]
object_min = 5
object_max = 7
"#;

fn pgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgnn")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr is not json: {}", String::from_utf8_lossy(&out.stderr)));
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let out = pgnn(&["generate-data", "--config", p(&cfg), "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = pgnn(&["train", "--config", p(&cfg), "--data", p(&data), "--run", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for entry in [
        "config.snapshot",
        "losses.csv",
        "checkpoints",
        "pseudo_labels",
        "attention",
        "metrics.json",
    ] {
        assert!(run.join(entry).exists(), "missing {entry}");
    }
    let header = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(header.lines().next(), Some("epoch,step,l_D,l_P,l_TV,l_c,total"));

    let out = pgnn(&["refine-labels", "--run", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = dir.path().join("eval.json");
    let out = pgnn(&[
        "evaluate",
        "--pred",
        p(&run.join("pseudo_labels")),
        "--gt",
        p(&data.join("gt")),
        "--classes",
        "2",
        "--out",
        p(&report),
    ]);
    assert!(out.status.success());
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(stdout, written);
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(stdout["mean_iou"], metrics["mean_iou"]);

    let maps = dir.path().join("maps");
    let out = pgnn(&["export-maps", "--run", p(&run), "--out", p(&maps)]);
    assert!(out.status.success());
    assert!(std::fs::read_dir(&maps).unwrap().count() > 0);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = pgnn(&["sweep", "--config", p(&cfg), "--axis", "lambda", "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("lambda1,lambda2,lambda3,lambda4,precision,recall,miou,status"));
}

#[test]
fn missing_prediction_files_fail_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let data = dir.path().join("data");
    assert!(pgnn(&["generate-data", "--config", p(&cfg), "--out", p(&data)])
        .status
        .success());
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = pgnn(&["evaluate", "--pred", p(&empty), "--gt", p(&data.join("gt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "missing_files");
}

#[test]
fn bad_config_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "epochs = \"many\"\n").unwrap();
    let out = pgnn(&["train", "--config", p(&cfg), "--run", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "config");

    let out = pgnn(&["sweep", "--axis", "depth", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");

    let out = pgnn(&["refine-labels", "--run", p(&dir.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "io");

    assert!(pgnn(&["--help"]).status.success());
}
