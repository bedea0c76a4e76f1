#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_gaborscope");

/// A deliberately small network so the full pipeline runs in seconds.
pub const TINY_CONFIG: &str = "\
max_iterations = 20
validate_every = 10
arch.mix_filters = 8
arch.block_filters = [8, 8, 8, 8, 8]
arch.hidden = [16]
";

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("GABORSCOPE_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs every subcommand once under `root` and returns the output directories.
pub fn pipeline(root: &Path) -> Vec<PathBuf> {
    let d = |name: &str| root.join(name);
    std::fs::write(d("cfg.txt"), TINY_CONFIG).unwrap();
    let cfg = d("cfg.txt");
    ok(&[
        "--seed",
        "1",
        "synth",
        "--out-dir",
        s(&d("raw")),
        "--subjects",
        "6",
        "--epochs",
        "100",
    ]);
    ok(&["ingest", "--data-dir", s(&d("raw")), "--out-dir", s(&d("store"))]);
    ok(&[
        "--seed",
        "2",
        "split",
        "--data-dir",
        s(&d("store")),
        "--strategy",
        "subject:3",
        "--out-dir",
        s(&d("split")),
    ]);
    let split = d("split").join("split.json");
    ok(&[
        "--seed",
        "3",
        "train-single",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&d("store")),
        "--split",
        s(&split),
        "--out-dir",
        s(&d("single")),
    ]);
    ok(&[
        "--seed",
        "4",
        "train-multi",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&d("store")),
        "--split",
        s(&split),
        "--checkpoint",
        s(&d("single").join("single.ckpt")),
        "--out-dir",
        s(&d("multi")),
    ]);
    let model = d("multi").join("model.ckpt");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&split).unwrap()).unwrap();
    let trace = format!("{}:3", manifest["test_recordings"][0].as_str().unwrap());
    ok(&[
        "score",
        "--checkpoint",
        s(&model),
        "--data-dir",
        s(&d("store")),
        "--split",
        s(&split),
        "--out-dir",
        s(&d("score")),
    ]);
    ok(&[
        "eval",
        "--predictions",
        s(&d("score").join("predictions.csv")),
        "--truth",
        s(&d("score").join("truth.csv")),
        "--out-dir",
        s(&d("eval")),
    ]);
    ok(&[
        "interpret",
        "--checkpoint",
        s(&model),
        "--data-dir",
        s(&d("store")),
        "--split",
        s(&split),
        "--trace",
        &trace,
        "--out-dir",
        s(&d("interp")),
    ]);
    ok(&["export-kernels", "--checkpoint", s(&model), "--out-dir", s(&d("kernels"))]);
    ["raw", "store", "split", "single", "multi", "score", "eval", "interp", "kernels"]
        .iter()
        .map(|n| d(n))
        .collect()
}

/// Every CSV under `dirs`, keyed by its path relative to `root`.
pub fn csv_files(root: &Path, dirs: &[PathBuf]) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for dir in dirs {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().is_some_and(|e| e == "csv") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
