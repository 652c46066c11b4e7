use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rml"))
        .args(args)
        .env("RML_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = rml(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.txt");
    let run = dir.path().join("run");
    let stdout = ok(&["gen-data", "--identities", "20", "--dim", "16", "--out", p(&data)]);
    assert!(stdout.contains("160 pairs (0 noisy)"), "{stdout}");

    ok(&[
        "train", "--data", p(&data), "--out-dir", p(&run), "--epochs", "3", "--warmup-epochs", "1",
        "--lr-warmup-epochs", "1", "--noise-rate", "0.3", "--loss", "trls", "--batch-size", "16",
    ]);
    for f in ["history.csv", "model.ckpt", "metrics.json", "best.ckpt", "division.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("history.csv")).unwrap().lines().count(), 4);

    let eval_out = dir.path().join("eval.json");
    ok(&["evaluate", "--checkpoint", p(&run.join("model.ckpt")), "--data", p(&data), "--out", p(&eval_out)]);
    let got: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(got["rank1"], saved["rank1"]);
    assert_eq!(got["mAP"], saved["mAP"]);
}

#[test]
fn experiment_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("grid.conf");
    fs::write(
        &spec,
        "name = grid\nidentities = 20\nepochs = 2\nwarmup_epochs = 1\nembed_dim = 8\nnum_tokens = 4\nmargins = 0.1, 0.3\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&["experiment", "--config", p(&spec), "--out-dir", p(&out), "--set", "batch_size=16"]);
    let summary = out.join("summary.csv");
    assert_eq!(fs::read_to_string(&summary).unwrap().lines().count(), 3);
    let long = dir.path().join("long.csv");
    ok(&["report", "--summary", p(&summary), "--out", p(&long)]);
    let text = fs::read_to_string(&long).unwrap();
    assert!(text.starts_with("axis,x,series,metric,value"));
    assert!(text.lines().skip(1).all(|l| l.starts_with("margin,")));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = rml(&["evaluate", "--checkpoint", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = rml(&["gen-data", "--noise-rate", "1.5", "--out", p(&dir.path().join("d.txt"))]);
    assert_eq!(out.status.code(), Some(2));

    let spec = dir.path().join("bad.conf");
    fs::write(&spec, "noise_rates =\n").unwrap();
    assert_eq!(rml(&["experiment", "--config", p(&spec)]).status.code(), Some(2));

    assert!(!rml(&["bogus"]).status.success());
}
