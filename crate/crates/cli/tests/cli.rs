use std::path::Path;
use std::process::{Command, Output};

fn pgseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgseg")).args(args).env("RUST_LOG", "warn").output().expect("spawn pgseg")
}

fn ok(args: &[&str]) -> String {
    let o = pgseg(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, rep, inf) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("rep"), tmp.path().join("inf"));
    ok(&["gen-data", "--out", s(&data), "--cases", "2", "--seed", "3"]);
    ok(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--deterministic"]);
    assert!(run.join("manifest.json").is_file());
    assert!(run.join("metrics.jsonl").is_file());

    let out = ok(&["eval", "--checkpoint", s(&run), "--data", s(&data), "--out", s(&rep)]);
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(summary["mDice"].as_f64().is_some(), "{out}");
    assert!(rep.join("metrics.csv").is_file() && rep.join("summary.json").is_file());

    let ids = pgseg_case_ids(&data);
    ok(&["infer", "--checkpoint", s(&run), "--image", s(&data), "--case", &ids[0], "--out", s(&inf), "--heatmap"]);
    let heat = pgseg::pipeline::read_png(&inf.join("heatmap.png")).unwrap();
    assert_eq!(heat.dim(), (224, 224));
    let labels = pgseg::pipeline::read_png(&inf.join("labels.png")).unwrap();
    assert!(labels.iter().all(|&c| c < 9));
}

fn pgseg_case_ids(dir: &Path) -> Vec<String> {
    let samples = pgseg::pipeline::load_dataset(dir).unwrap();
    samples.into_iter().map(|s| s.case_id).collect()
}

#[test]
fn metrics_on_png_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let (p, t, out) = (tmp.path().join("p"), tmp.path().join("t"), tmp.path().join("out"));
    std::fs::create_dir_all(&p).unwrap();
    std::fs::create_dir_all(&t).unwrap();
    let mut a = ndarray::Array2::<u8>::zeros((32, 32));
    a.slice_mut(ndarray::s![4..12, 4..12]).fill(1);
    a.slice_mut(ndarray::s![16..28, 16..28]).fill(3);
    pgseg::pipeline::write_png(&p.join("x.png"), &a).unwrap();
    pgseg::pipeline::write_png(&t.join("x.png"), &a).unwrap();
    let out_s = ok(&["metrics", "--pred", s(&p), "--target", s(&t), "--out", s(&out)]);
    let summary: serde_json::Value = serde_json::from_str(&out_s).unwrap();
    assert_eq!(summary["mDice"], 1.0);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);

    std::fs::remove_file(t.join("x.png")).unwrap();
    assert!(!pgseg(&["metrics", "--pred", s(&p), "--target", s(&t), "--out", s(&out)]).status.success());
}

#[test]
fn bad_arguments_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pgseg(&["train", "--data", "x", "--out", s(tmp.path()), "--ablate", "nope"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));

    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let o = pgseg(&["train", "--data", "x", "--out", s(tmp.path()), "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
