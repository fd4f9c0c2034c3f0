use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn warpbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpbench")).args(args).env_remove("WARPBENCH_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn exit_codes() {
    assert_eq!(code(&warpbench(&["--help"])), 0);
    assert_eq!(code(&warpbench(&["--version"])), 0);
    assert_eq!(code(&warpbench(&["frobnicate"])), 1);
    assert_eq!(code(&warpbench(&["gen", "--count", "1"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.fmap");
    fs::write(&bad, b"FMAP\x09\0\0\0").unwrap();
    let o = warpbench(&["inspect", "--input", s(&bad), "--out", s(&dir.path().join("x.ppm"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_is_deterministic_and_reads_seed_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&warpbench(&["gen", "--out", s(&a), "--count", "2", "--seed", "11", "--resolution", "64", "--folds", "1"])), 0);
    assert_eq!(code(&warpbench(&["gen", "--out", s(&b), "--count", "2", "--seed", "11", "--resolution", "64", "--folds", "1", "--threads", "2"])), 0);
    assert_eq!(tree(&a), tree(&b));
    let o = Command::new(env!("CARGO_BIN_EXE_warpbench"))
        .args(["gen", "--out", s(&c), "--count", "2", "--resolution", "64", "--folds", "1"])
        .env("WARPBENCH_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let samples = |d: &Path| tree(d).into_iter().filter(|(n, _)| n != "meta.json").collect::<Vec<_>>();
    assert_eq!(samples(&a), samples(&c));
}

#[test]
fn replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&warpbench(&["gen", "--out", s(&a), "--count", "1", "--seed", "4", "--resolution", "64", "--folds", "2"])), 0);
    let o = warpbench(&["replay", s(&a.join("meta.json")), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn sample_tools_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let small = root.join("small");
    let big = root.join("big");
    assert_eq!(code(&warpbench(&["gen", "--out", s(&small), "--count", "1", "--seed", "2", "--resolution", "64", "--folds", "1"])), 0);
    assert_eq!(code(&warpbench(&["gen", "--out", s(&big), "--count", "1", "--seed", "2", "--resolution", "192", "--folds", "1"])), 0);
    let sm = small.join("sample_0000");
    let bg = big.join("sample_0000");

    let flat = root.join("flat.ppm");
    let o = warpbench(&["rectify", "--image", s(&sm.join("warped.ppm")), "--map", s(&sm.join("backward.fmap")), "--mask", s(&sm.join("backward_mask.fmap")), "--out", s(&flat)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(&flat).unwrap().starts_with(b"P6"));

    let inv = root.join("inv.fmap");
    let o = warpbench(&["invert", "--forward", s(&sm.join("forward.fmap")), "--mask", s(&sm.join("forward_mask.fmap")), "--out", s(&inv), "--height", "64", "--width", "64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("inv_mask.fmap").exists());

    let o = warpbench(&["loss", "--pred", s(&sm), "--gt", s(&sm), "--combined"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let loss: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(loss["total"], 0.0);

    let o = warpbench(&["eval", "--sample", s(&bg), "--baseline", "gt", "--out", s(&root.join("eval_gt"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["mean_ed"], 0.0);
    assert_eq!(summary["mean_ms_ssim"], 1.0);
    assert!(root.join("eval_gt/summary.json").exists());

    let o = warpbench(&["eval", "--sample", s(&bg), "--pred", s(&sm.join("backward.fmap")), "--out", s(&root.join("eval_bad"))]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("192x192x2") && err.contains("64x64x2"), "{err}");
}

#[test]
fn gradcheck_passes() {
    for loss in ["3d", "combined"] {
        let o = warpbench(&["gradcheck", "--loss", loss, "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
}
