use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pbd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("PBD_DEVICE")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = r#"
schema_version = 1

[dataset]
seed = 3
train = 4
test = 4

[train]
input_size = 32
learning_rate = 0.002
max_iterations = 2
"#;

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), CONFIG).unwrap();

    ok(&pbd(&["generate", "--config", "cfg.toml", "--out", "data"], d));
    assert!(d.join("data/train.jsonl").exists() && d.join("data/test.jsonl").exists());
    assert_eq!(fs::read_dir(d.join("data/images")).unwrap().count(), 8);

    let out = ok(&pbd(&["train", "--config", "cfg.toml", "--data", "data", "--out", "model.json", "--curve", "curve.jsonl"], d));
    assert!(out.contains("trained 2 iterations"));
    assert_eq!(fs::read_to_string(d.join("curve.jsonl")).unwrap().lines().count(), 2);

    let table = ok(&pbd(&["evaluate", "--config", "cfg.toml", "--checkpoint", "model.json", "--data", "data", "--out", "eval"], d));
    assert!(table.contains("PN-ACC") && table.contains("mode: pixel"));
    for f in ["report.txt", "report.jsonl", "predictions.jsonl"] {
        assert!(d.join("eval").join(f).exists(), "{f}");
    }
    let again = ok(&pbd(&["report", "eval/report.jsonl"], d));
    assert!(again.contains("AN-MAE"));

    let paper = ok(&pbd(&["evaluate", "--pred", "data/test.jsonl", "--gt", "data/test.jsonl", "--mode", "paper"], d));
    assert!(paper.contains("mode: paper"));
    let pn = paper.lines().find(|l| l.starts_with("PN-ACC")).unwrap();
    assert!(pn.split_whitespace().skip(1).all(|v| v == "1.0000" || v == "—"), "{pn}");

    let clusters = ok(&pbd(&["dedup", "--images", "data/images", "--threshold", "0.0001"], d));
    assert!(clusters.starts_with("8 images, 8 clusters"));
    fs::copy(d.join("data/images/train-0000.png"), d.join("data/images/train-0000-copy.png")).unwrap();
    let clusters = ok(&pbd(&["dedup", "--images", "data/images", "--threshold", "0.0001", "--out", "dups.jsonl"], d));
    assert!(clusters.starts_with("9 images, 8 clusters"));
    assert!(fs::read_to_string(d.join("dups.jsonl")).unwrap().contains("\"representative\":\"train-0000\""));

    let fused = ok(&pbd(&["fuse", "data/test.jsonl", "data/test.jsonl", "--out", "fused.jsonl"], d));
    assert!(fused.lines().all(|l| l.ends_with("fused")));
    assert_eq!(fs::read_to_string(d.join("fused.jsonl")).unwrap(), fs::read_to_string(d.join("data/test.jsonl")).unwrap());
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_pbd"))
        .args(["generate", "--out", "x"])
        .current_dir(d)
        .env("PBD_DEVICE", "cuda")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("only `cpu`"));

    fs::write(d.join("bad.toml"), "schema_version = 7\n").unwrap();
    let out = pbd(&["generate", "--config", "bad.toml", "--out", "x"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));

    let out = pbd(&["train", "--data", "nowhere", "--out", "m.json"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing split"));
}
