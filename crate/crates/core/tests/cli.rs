use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[train]
max_epoch = 2
batch_size = 50
z_dim = 8
hidden = 16
max_modes = 3
"#;

fn octgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octgan")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = octgan(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(dir: &Path) -> Vec<u8> {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    ok(&["simulate", "--config", s(&cfg), "--oracle", "ring", "--rows", "200", "--out", s(dir)]);
    ok(&["train", "--config", s(&cfg), "--train", s(&dir.join("train.csv")), "--schema", s(&dir.join("schema.json")), "--out", s(dir)]);
    let syn = dir.join("syn.csv");
    ok(&["generate", "--model", s(&dir.join("model.json")), "--rows", "120", "--seed", "9", "--out", s(&syn)]);
    std::fs::read(syn).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = pipeline(d);
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next(), Some("x,y"));
    assert_eq!(text.lines().count(), 121);
    for f in ["train.csv.meta.json", "test.csv.meta.json", "oracle.json", "schema.json", "train_log.json", "syn.csv.meta.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("syn.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
    assert_eq!(meta["rows"], 120);
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["seed"], 3);
    assert_eq!(log["log"]["epochs"].as_array().unwrap().len(), 2);

    let report = d.join("report.json");
    ok(&[
        "eval", "--synthetic", s(&d.join("syn.csv")), "--train", s(&d.join("train.csv")), "--test", s(&d.join("test.csv")),
        "--oracle", "ring", "--classes", "8", "--out", s(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["likelihood"]["pr_f_given_s"].is_number());
    assert_eq!(r["clustering"]["k"].as_u64().map(|k| k % 8), Some(0));

    let path = d.join("path.csv");
    let plot = d.join("plot.csv");
    ok(&["interpolate", "--model", s(&d.join("model.json")), "--steps", "4", "--out", s(&path), "--plot-data", s(&plot)]);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 6);
    assert_eq!(std::fs::read_to_string(&plot).unwrap().lines().count(), 11);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(pipeline(a.path()), pipeline(b.path()));
}

#[test]
fn zero_rows_give_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let out = d.join("empty.csv");
    ok(&["generate", "--model", s(&d.join("model.json")), "--rows", "0", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(out).unwrap().trim_end(), "x,y");
}

fn failure(args: &[&str]) -> (i32, String) {
    let out = octgan(args);
    let err = String::from_utf8(out.stderr).unwrap();
    (out.status.code().unwrap(), err)
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let (code, err) = failure(&["generate", "--model", "/nonexistent/model.json", "--rows", "1", "--out", s(&d.join("x.csv"))]);
    assert_eq!(code, 2);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error code=2 kind=missing_file"));

    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1\n").unwrap();
    let (code, err) = failure(&["simulate", "--config", s(&bad), "--oracle", "ring", "--rows", "5", "--out", s(d)]);
    assert_eq!(code, 4, "{err}");

    let wrong = d.join("wrong.csv");
    std::fs::write(&wrong, "a,b,c\n1,2,3\n").unwrap();
    let (code, err) = failure(&["eval", "--synthetic", s(&wrong), "--oracle", "ring"]);
    assert_eq!(code, 3, "{err}");

    let (code, _) = failure(&["simulate", "--rows", "5", "--out", s(d)]);
    assert_eq!(code, 4);
}
