use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"version = 1

[dataset]
phantom_count = 3

[phantom]
extents = [48, 48, 48]

[model]
side = 32
width_divisor = 8

[train]
epochs = 2
cubes_per_epoch = 6
"#;

fn pianet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pianet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pianet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32, tag: &str) -> String {
    let out = pianet(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error code={tag} exit={code}: ")), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// File name to contents, manifests excluded.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn phantom_is_deterministic_and_replayable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    ok(&["phantom", "--seed", "7", "--count", "2", "--side", "48", "--out", s(&a)]);
    ok(&["phantom", "--seed", "7", "--count", "2", "--side", "48", "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(tree(&a).len(), 9);
    let manifest = a.join("phantom.manifest.json");
    ok(&["phantom", "--config", s(&manifest), "--out", s(&c)]);
    assert_eq!(tree(&a), tree(&c));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 9);
    assert!(m["timings"]["generate"].as_f64().unwrap() >= 0.0);
    ok(&["phantom", "--seed", "8", "--count", "2", "--side", "48", "--out", s(&c)]);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let d = |n: &str| t.path().join(n);
    ok(&["phantom", "--config", s(&cfg), "--seed", "3", "--out", s(&d("raw"))]);
    ok(&["preprocess", "--config", s(&cfg), "--input", s(&d("raw")), "--out", s(&d("pre"))]);
    ok(&["pretrain", "--config", s(&cfg), "--data", s(&d("pre")), "--out", s(&d("s1"))]);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&d("pre")),
        "--pretrained",
        s(&d("s1").join("stage1.ckpt")),
        "--out",
        s(&d("s2")),
    ]);
    let ck = d("s2").join("stage2.ckpt");
    ok(&["detect", "--config", s(&cfg), "--data", s(&d("pre")), "--checkpoint", s(&ck), "--out", s(&d("det"))]);
    let csv = d("det").join("detections.csv");
    let stdout = ok(&[
        "evaluate",
        "--detections",
        s(&csv),
        "--annotations",
        s(&d("pre").join("annotations.csv")),
        "--out",
        s(&d("eval")),
    ]);
    assert!(stdout.starts_with("CPM "));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d("eval").join("report.json")).unwrap()).unwrap();
    let cpm = report["cpm"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cpm));
    assert!(d("eval").join("report.csv").exists() && d("eval").join("report.dat").exists());

    // Same inputs and seed, same detections.
    ok(&["detect", "--config", s(&cfg), "--data", s(&d("pre")), "--checkpoint", s(&ck), "--out", s(&d("det2"))]);
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(d("det2").join("detections.csv")).unwrap());

    let stdout = ok(&[
        "slice",
        "--volume",
        s(&d("pre").join("phantom000.pvol")),
        "--detections",
        s(&csv),
        "--annotations",
        s(&d("pre").join("annotations.csv")),
        "--z",
        "10",
        "--out",
        s(&d("slice")),
    ]);
    assert_eq!(stdout.trim(), "wrote 1 images");
    let pgm = std::fs::read(d("slice").join("phantom000_z0010.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    // A stage-1 checkpoint is not a detector.
    fails(
        &["detect", "--data", s(&d("pre")), "--checkpoint", s(&d("s1").join("stage1.ckpt")), "--out", s(&d("x"))],
        2,
        "E_CONFIG",
    );
}

#[test]
fn untrained_detect_writes_valid_csv() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let d = |n: &str| t.path().join(n);
    ok(&["phantom", "--config", s(&cfg), "--count", "1", "--out", s(&d("raw"))]);
    ok(&["preprocess", "--input", s(&d("raw")), "--out", s(&d("pre"))]);
    ok(&["detect", "--config", s(&cfg), "--untrained", "--threshold", "0", "--data", s(&d("pre")), "--out", s(&d("det"))]);
    let text = std::fs::read_to_string(d("det").join("detections.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scan_id,x_mm,y_mm,z_mm,r_mm,score"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.len() == 5 && r[3] > 0.0 && (0.0..=1.0).contains(&r[4])));
}

#[test]
fn failures_are_single_line_with_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = s(t.path());
    fails(&["phantom", "--out", out, "--bogus"], 2, "E_USAGE");
    fails(&["phantom", "--out", out, "--set", "train.epohcs=3"], 2, "E_CONFIG");
    let bad = t.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochs = 2\n").unwrap();
    let e = fails(&["phantom", "--config", s(&bad), "--out", out], 2, "E_CONFIG");
    assert!(e.contains("version"));
    std::fs::write(&bad, "version = 1\n[train\n").unwrap();
    fails(&["phantom", "--config", s(&bad), "--out", out], 3, "E_PARSE");
    fails(&["detect", "--untrained", "--data", "/nonexistent/dir", "--out", out], 5, "E_IO");
    std::fs::write(t.path().join("x.pvol"), b"PIAVOL01 truncated").unwrap();
    fails(&["detect", "--untrained", "--data", out, "--out", out], 3, "E_PARSE");
}

#[test]
fn every_subcommand_documents_its_flags() {
    for (cmd, flags) in [
        ("phantom", &["--count", "--side"][..]),
        ("preprocess", &["--input"]),
        ("pretrain", &["--data", "--epochs", "--resume"]),
        ("train", &["--data", "--epochs", "--pretrained", "--resume"]),
        ("detect", &["--data", "--checkpoint", "--untrained", "--threshold"]),
        ("evaluate", &["--detections", "--annotations", "--data"]),
        ("gradcheck", &["--param-fraction", "--input-entries", "--layers-only"]),
        ("slice", &["--volume", "--detections", "--annotations", "--scan-id", "--z", "--min-score", "--zoom"]),
    ] {
        let help = ok(&[cmd, "--help"]);
        for f in flags.iter().chain(&["--config", "--set", "--seed", "--out", "--verbose"]) {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn gradcheck_layers() {
    let t = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--layers-only", "--out", s(t.path())]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 11);
    assert!(t.path().join("gradcheck.json").exists());
}
