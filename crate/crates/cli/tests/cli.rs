mod support;

use support::{csv_files, ok, pipeline, run, BIN};

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn last_json(out: &std::process::Output) -> serde_json::Value {
    let text = stderr(out);
    serde_json::from_str(text.lines().last().expect("stderr has a line")).expect("last stderr line is JSON")
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.csv");
    std::fs::write(
        &truth,
        "recording,epoch,stage\na,0,Wake\na,1,S1\na,2,S2\nb,0,SWS\nb,1,REM\nb,2,S2\n",
    )
    .unwrap();
    let t = truth.to_str().unwrap();
    let out_dir = dir.path().join("eval");
    let out = ok(&["eval", "--predictions", t, "--truth", t, "--out-dir", out_dir.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("100.00"), "{stdout}");
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["final"]["accuracy"]["mean"].as_f64(), Some(1.0));
    assert_eq!(metrics["final"]["kappa"]["mean"].as_f64(), Some(1.0));
    assert!(out_dir.join("run_manifest.json").exists());
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let out = run(&["train-single", "--data-dir", "x", "--split", "y", "--out-dir", "z"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    assert_eq!(last_json(&out)["error"], "usage");
}

#[test]
fn missing_input_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let m = missing.to_str().unwrap();
    let out = run(&["eval", "--predictions", m, "--truth", m, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = last_json(&out);
    assert_eq!(err["exit_code"], 3);
    assert!(err["message"].as_str().unwrap().contains("nope.csv"));
}

#[test]
fn recording_and_split_together_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_str().unwrap();
    ok(&["init", "--out-dir", p]);
    let ck = dir.path().join("init.ckpt");
    let out = run(&[
        "score",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        p,
        "--split",
        "s.json",
        "--recording",
        "r",
        "--out-dir",
        p,
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exported_kernels_of_a_fresh_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_str().unwrap();
    ok(&["--seed", "5", "init", "--out-dir", p]);
    let ck = dir.path().join("init.ckpt");
    let out_dir = dir.path().join("k");
    ok(&[
        "export-kernels",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    let waves = std::fs::read_to_string(out_dir.join("kernel_waveforms.csv")).unwrap();
    let mut lines = waves.lines();
    assert_eq!(lines.next(), Some("kernel,t,value"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40 * 200);
    let kernels: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(kernels.len(), 40);
    let params = std::fs::read_to_string(out_dir.join("kernel_params.csv")).unwrap();
    assert_eq!(params.lines().count(), 41);
    assert_eq!(params.lines().filter(|l| l.contains(",eog,")).count(), 8);
}

#[test]
fn plain_conv_checkpoint_has_no_kernels_to_export() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_str().unwrap();
    ok(&["init", "--ablation", "plain-conv", "--out-dir", p]);
    let ck = dir.path().join("init.ckpt");
    let out = run(&["export-kernels", "--checkpoint", ck.to_str().unwrap(), "--out-dir", p]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let dirs = pipeline(dir.path());
    for d in &dirs {
        assert!(d.join("run_manifest.json").exists(), "{}", d.display());
    }
    let interp = &dirs[7];
    for f in [
        "kernel_impact.csv",
        "stage_impact.csv",
        "modality_ratio.csv",
        "effect_traces.csv",
        "stage_tests.csv",
    ] {
        assert!(interp.join(f).exists(), "{f}");
    }
    let score = std::fs::read_to_string(dirs[5].join("predictions.csv")).unwrap();
    let truth = std::fs::read_to_string(dirs[5].join("truth.csv")).unwrap();
    assert_eq!(score.lines().count(), truth.lines().count());
    assert!(!csv_files(dir.path(), &dirs).is_empty());
    assert!(std::path::Path::new(BIN).exists());
}
