use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uqdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqdepth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = uqdepth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn count_files(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn no_verb_is_a_usage_error() {
    let out = uqdepth(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_verb_and_flag_are_usage_errors() {
    assert_eq!(uqdepth(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(uqdepth(&["gen-toy", "--count", "1", "--out", "x", "--bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = uqdepth(&[
        "eval",
        "--ckpt",
        missing.join("c.safetensors").to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_toy_writes_pairs_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["gen-toy", "--count", "10", "--size", "64", "--seed", "7", "--out", d.to_str().unwrap()]);
    assert_eq!(count_files(&d.join("rgb"), "png"), 10);
    assert_eq!(count_files(&d.join("depth"), "png"), 10);
    assert!(d.join("meta.json").is_file());
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, run) = (p("data"), p("run"));
    ok(&["gen-toy", "--count", "12", "--size", "32", "--seed", "1", "--out", &data]);
    ok(&[
        "train",
        "--data",
        &data,
        "--out",
        &run,
        "--size",
        "32",
        "--epochs",
        "1",
        "--pretrain-epochs",
        "1",
        "--batch-size",
        "4",
        "--seed",
        "5",
    ]);
    let ckpt = format!("{run}/checkpoint.safetensors");
    assert!(Path::new(&ckpt).is_file());
    assert!(Path::new(&run).join("epochs.csv").is_file());

    let eval_out = p("eval");
    ok(&["eval", "--ckpt", &ckpt, "--data", &data, "--median-scale", "--out", &eval_out]);
    let metrics = fs::read_to_string(Path::new(&eval_out).join("metrics.csv")).unwrap();
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    for name in [
        "delta1", "delta2", "delta3", "abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "silog",
    ] {
        assert!(header.contains(&name), "missing column {name}");
    }
    assert_eq!(metrics.lines().count(), 13);
    let summary = fs::read_to_string(Path::new(&eval_out).join("summary.csv")).unwrap();
    assert!(summary.contains('±'), "{summary}");

    let pred_out = p("pred");
    ok(&["predict", "--ckpt", &ckpt, "--data", &data, "--out", &pred_out]);
    assert_eq!(count_files(&Path::new(&pred_out).join("depth"), "png"), 12);
    assert_eq!(count_files(&Path::new(&pred_out).join("preview"), "png"), 12);

    let sp_out = p("sparsify");
    ok(&["sparsify", "--ckpt", &ckpt, "--data", &data, "--plot", "--out", &sp_out]);
    assert!(Path::new(&sp_out).join("sparsification.csv").is_file());
    assert!(count_files(Path::new(&sp_out), "png") >= 1);

    let rec_out = p("rec");
    ok(&["reconstruct", "--ckpt", &ckpt, "--data", &data, "--out", &rec_out]);
    let ply_dir = Path::new(&rec_out).join("ply");
    assert_eq!(count_files(&ply_dir, "ply"), 12);
    let first = fs::read_dir(&ply_dir).unwrap().next().unwrap().unwrap().path();
    let text = fs::read_to_string(first).unwrap();
    assert!(text.starts_with("ply\n"));
    assert!(text.contains(&format!("element vertex {}", 32 * 32)));
}
