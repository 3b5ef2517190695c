use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tdet_core::io::{encode_ppm, parse_netpbm, Netpbm};

fn tdet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdet"))
        .args(args)
        .current_dir(dir)
        .env_remove("TDET_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = tdet(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file under `dir` with its bytes, sorted by path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_test_image(path: &Path) {
    let (w, h) = (13, 9);
    // Few gray levels, so windows differ in entropy.
    let pixels: Vec<u8> = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            let v = (((x / 3 + y / 2) % 4) * 60 + (x * y) % 3) as u8;
            [v, v, v]
        })
        .collect();
    fs::write(path, encode_ppm(w, h, &pixels)).unwrap();
}

const TINY: &str = r#"{
  "train_sequences": 3,
  "test_sequences": 2,
  "train": { "epochs": 1, "seq_len": 3, "model": { "gru_placement": "stage-4", "ie_placement": "stage-4" } }
}"#;

#[test]
fn entropy_map_keeps_dimensions_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_test_image(&d.join("in.ppm"));
    let before = fs::read(d.join("in.ppm")).unwrap();
    ok(&["entropy", "in.ppm", "-o", "a/out.pgm", "--raw"], d);
    let first = fs::read(d.join("a/out.pgm")).unwrap();
    match parse_netpbm(&first).unwrap() {
        Netpbm::Gray { width, height, .. } => assert_eq!((width, height), (13, 9)),
        _ => panic!("expected a PGM"),
    }
    assert!(String::from_utf8_lossy(&first).contains("bits -> 255"));
    assert!(d.join("a/out.bin").is_file() && d.join("a/out.json").is_file());
    ok(&["entropy", "in.ppm", "-o", "b/out.pgm", "--raw"], d);
    assert_eq!(snapshot(&d.join("a")), snapshot(&d.join("b")));
    assert_eq!(fs::read(d.join("in.ppm")).unwrap(), before);

    ok(&["entropy", "in.ppm", "-o", "c.pgm", "--passes", "1", "--no-open"], d);
    assert_ne!(fs::read(d.join("c.pgm")).unwrap(), first);
}

#[test]
fn entropy_rejects_bad_window() {
    let dir = tempfile::tempdir().unwrap();
    write_test_image(&dir.path().join("in.ppm"));
    let out = tdet(&["entropy", "in.ppm", "-o", "o.pgm", "--window", "4"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cost_table_has_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"in_channels": 1024, "hidden": 256}"#).unwrap();
    ok(&["cost", "--config", "cfg.json", "-o", "t.csv"], d);
    let csv = fs::read_to_string(d.join("t.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (variant, target) in [("lstm", 8.41e6), ("gru", 6.33e6)] {
        let r = rows.iter().find(|r| r[0] == variant).unwrap();
        let params: f64 = r[1].parse().unwrap();
        assert!((params - target).abs() / target < 0.01, "{variant} {params}");
    }
    ok(&["cost", "--config", "cfg.json", "-o", "t2.csv"], d);
    assert_eq!(fs::read(d.join("t2.csv")).unwrap(), csv.as_bytes());
}

#[test]
fn cost_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"hiden": 3}"#).unwrap();
    let out = tdet(&["cost", "--config", "cfg.json", "-o", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("t.csv").exists());
}

#[test]
fn gradcheck_passes_and_reports_each_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    for op in ["conv2d", "depthwise_conv", "squeezed_gru_step", "dense_lstm_step", "feature_enhance", "ssd_loss"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "{op} missing:\n{text}");
    }
}

#[test]
fn usage_errors_exit_2_with_one_line_first() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["cost"], &["cost", "-o", "x.csv", "--bogus"]] {
        let out = tdet(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.lines().next().unwrap().starts_with("error kind=usage message="), "{err}");
    }
}

#[test]
fn io_errors_exit_1_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdet(&["entropy", "missing.ppm", "-o", "x.pgm"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=io") && err.contains("missing.ppm"), "{err}");
}

#[test]
fn unknown_placement_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdet(&["ablate", "--placements", "none,conv-13"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("extra-map-2") && err.contains("stage-1"), "{err}");
}

#[test]
fn toy_training_evaluation_and_ablation_are_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["train-toy", "--config", "tiny.json", "-o", "run1"], d);
    ok(&["train-toy", "--config", "tiny.json", "-o", "run2"], d);
    let a = snapshot(&d.join("run1"));
    assert_eq!(a, snapshot(&d.join("run2")));
    for f in ["config.json", "loss_curve.csv", "metrics.json", "metrics.csv", "model/model.json"] {
        assert!(a.iter().any(|(p, _)| p == Path::new(f)), "{f}");
    }

    let e1 = ok(&["eval-toy", "--model", "run1/model", "--config", "tiny.json", "-o", "e1.json"], d);
    let e2 = ok(&["eval-toy", "--model", "run2/model", "--config", "tiny.json", "-o", "e2.json"], d);
    assert_eq!(e1.stdout, e2.stdout);
    assert_eq!(fs::read(d.join("e1.json")).unwrap(), fs::read(d.join("e2.json")).unwrap());
    // The evaluation reproduces the metrics written at training time.
    assert_eq!(fs::read(d.join("e1.json")).unwrap(), fs::read(d.join("run1/metrics.json")).unwrap());

    for out in ["ab1", "ab2"] {
        ok(&["ablate", "--placements", "none,stage-2", "--target", "ie", "--config", "tiny.json", "-o", out], d);
    }
    assert_eq!(snapshot(&d.join("ab1")), snapshot(&d.join("ab2")));
    let csv = fs::read_to_string(d.join("ab1/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn seed_flag_and_environment_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["train-toy", "--config", "tiny.json", "-o", "s", "--seed", "5"], d);
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(d.join("s/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["seed"], 5);

    let out = Command::new(env!("CARGO_BIN_EXE_tdet"))
        .args(["train-toy", "--config", "tiny.json", "-o", "e"])
        .current_dir(d)
        .env("TDET_SEED", "6")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&fs::read(d.join("e/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["seed"], 6);
}
