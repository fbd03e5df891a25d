use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use credassign::data::synthetic;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_credassign"));
    c.env_remove("CREDASSIGN_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_error_line(o: &Output, kind: &str, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one line, got {err:?}");
    assert!(lines[0].starts_with(&format!("error kind={kind} code={code} msg=")), "{err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synthetic::write_cifar_dir(&data, 40, 60, 5).unwrap();
    let root = dir.path().to_path_buf();
    Fixture { _dir: dir, data, root }
}

fn train(f: &Fixture, method: &str, out: &str) -> PathBuf {
    let out = f.root.join(out);
    let o = run(&[
        "train", "--method", method, "--lr", "3e-3", "--sigma", "0.05", "--epochs", "2", "--batch-size", "32",
        "--probe-every", "4", "--data-dir", s(&f.data), "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn help_and_usage_errors() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("bench-backward"));

    assert_error_line(&run(&["train", "--method", "nope", "--lr", "1", "--out", "x"]), "usage", 2);
    assert_error_line(&run(&["frobnicate"]), "usage", 2);
    assert_error_line(&run(&[]), "usage", 2);
}

#[test]
fn missing_data_dir_is_a_config_error() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["train", "--method", "bp", "--lr", "1e-3", "--out", s(out.path())]);
    assert_error_line(&o, "config", 6);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let o = run(&["sign", "--model", s(&dir.path().join("absent.ckpt")), "--out", s(&out)]);
    assert_error_line(&o, "io", 3);

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let o = run(&["sign", "--model", s(&junk), "--out", s(&out)]);
    assert_error_line(&o, "format", 4);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = run(&["train", "--method", "bp", "--lr", "1e-3", "--data-dir", s(&empty), "--out", s(&out)]);
    assert_error_line(&o, "io", 3);

    let o = run(&["train", "--method", "bp", "--lr=-1", "--data-dir", s(&empty), "--out", s(&out)]);
    assert_error_line(&o, "config", 6);
}

#[test]
fn train_and_analyse() {
    let f = fixture();
    let bp = train(&f, "bp", "bp");
    for name in ["best.ckpt", "last.ckpt", "metrics.csv", "manifest.json"] {
        assert!(bp.join(name).is_file(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bp.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["resolved"]["config"]["rule"], "bp");
    assert!(manifest["argv"].as_array().unwrap().len() > 3);
    let metrics = std::fs::read_to_string(bp.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,train_loss,train_acc,val_acc"));

    let fa = train(&f, "fa_toeplitz", "fa");
    let ckpt = bp.join("best.ckpt");
    let fa_ckpt = fa.join("best.ckpt");
    let data = s(&f.data);

    let out = f.root.join("eval");
    let o = run(&["eval", "--model", s(&ckpt), "--data-dir", data, "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["split"], "test");
    assert_eq!(eval["samples"], 60);
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 61);
    assert!(out.join("logits.bin").is_file());

    let out = f.root.join("angle");
    let o = run(&["angle", "--model", s(&fa_ckpt), "--data-dir", data, "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let angles = std::fs::read_to_string(out.join("angle.csv")).unwrap();
    assert!(angles.starts_with("layer,angle_degrees\n"));
    assert!(angles.lines().count() > 2);

    let out = f.root.join("sign");
    let o = run(&["sign", "--model", s(&fa_ckpt), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(out.join("concordance.csv")).unwrap().starts_with("layer,concordance\n"));

    let out = f.root.join("cka");
    let o = run(&[
        "cka", "--model-a", s(&ckpt), "--model-b", s(&fa_ckpt), "--subset", "all", "--data-dir", data, "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("cka_all.csv").is_file());

    // Identical models never disagree, so the disagreement subset is empty.
    let o = run(&[
        "cka", "--model-a", s(&ckpt), "--model-b", s(&ckpt), "--subset", "a_correct_b_wrong", "--data-dir", data,
        "--out", s(&out),
    ]);
    assert_error_line(&o, "empty_subset", 5);

    let out = f.root.join("channels");
    let o = run(&[
        "channels", "--model", s(&ckpt), "--class", "cat", "--layer", "conv2", "--data-dir", data, "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("importance_cat_conv2.csv")).unwrap();
    assert!(csv.starts_with("rank,channel,score\n"));
    assert_eq!(csv.lines().count(), 65);

    let out = f.root.join("exemplars");
    let o = run(&[
        "exemplars", "--model", s(&ckpt), "--layer", "conv1", "--channel", "0,5", "--data-dir", data, "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for c in [0, 5] {
        let ppm = std::fs::read(out.join(format!("exemplars_conv1_{c}.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n"));
        assert!(out.join(format!("exemplars_conv1_{c}.json")).is_file());
    }
}

#[test]
fn grid_writes_ranked_results() {
    let f = fixture();
    let out = f.root.join("grid");
    let o = run(&[
        "grid", "--method", "usf_sn", "--lrs", "1e-3,3e-3", "--weight-decays", "0", "--probe-epochs", "1",
        "--batch-size", "64", "--jobs", "2", "--data-dir", s(&f.data), "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("grid_results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let best: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("best_config.json")).unwrap()).unwrap();
    assert_eq!(best["rule"], "usf_sn");

    let o = run(&[
        "grid", "--method", "bp", "--sigmas", "0.1", "--data-dir", s(&f.data), "--out", s(&out),
    ]);
    assert_error_line(&o, "config", 6);
}

#[test]
fn env_var_supplies_data_dir() {
    let f = fixture();
    let out = f.root.join("env");
    let o = bin()
        .args(["train", "--method", "usf_init", "--lr", "1e-3", "--sigma", "0.05", "--epochs", "1", "--batch-size", "64", "--out", s(&out)])
        .env("CREDASSIGN_DATA_DIR", &f.data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("best.ckpt").is_file());
}

#[test]
fn bench_backward_reports_every_rule() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench-backward", "--batch-size", "2", "--reps", "1", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bench_backward.csv")).unwrap();
    assert!(csv.starts_with("method,batch_size,reps,median_seconds,ratio_to_bp\n"));
    for rule in ["bp", "fa_random", "fa_toeplitz", "usf_init", "usf_sn"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{rule},"))), "{csv}");
    }
}
