mod common;

use std::path::Path;
use std::process::{Command, Output};

use awh::eval::EvalReport;

use common::{tiny_toy, tiny_train};

fn awh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awh"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&awh(&[])), 2);
    assert_eq!(code(&awh(&["frobnicate"])), 2);
    assert_eq!(code(&awh(&["gen"])), 2);
    assert_eq!(code(&awh(&["gen", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&awh(&["train", "--out", "x", "--manifest", "a.jsonl"])), 2);
    assert_eq!(code(&awh(&["eval", "--ckpt", "c", "--manifest", "m", "--range", "50-20"])), 2);
    assert_eq!(code(&awh(&["--help"])), 0);
}

#[test]
fn validation_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "image_size = 30\ndepth_size = 8\n").unwrap();
    let out = awh(&["gen", "--out", s(&dir.path().join("d")), "--config", s(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "lambda_wdd = 1.0\n").unwrap();
    let out = awh(&[
        "train",
        "--out",
        s(&dir.path().join("o")),
        "--data",
        s(dir.path()),
        "--config",
        s(&unknown),
    ]);
    assert_eq!(code(&out), 1);

    let missing = dir.path().join("nothing.jsonl");
    let out = awh(&["eval", "--ckpt", s(&dir.path().join("none.safetensors")), "--manifest", s(&missing)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gen_train_eval_project_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.toml");
    std::fs::write(&toy, tiny_toy().to_toml()).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&awh(&["gen", "--out", s(&data), "--config", s(&toy), "--seed", "3"])), 0);
    assert!(data.join("toyhands.toml").is_file());

    let train_cfg = dir.path().join("train.toml");
    std::fs::write(&train_cfg, tiny_train().to_toml()).unwrap();
    let run = dir.path().join("run");
    let out = awh(&["train", "--out", s(&run), "--data", s(&data), "--config", s(&train_cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.safetensors");
    assert!(ckpt.is_file() && run.join("metrics.jsonl").is_file());

    let report_dir = dir.path().join("report");
    let out = awh(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&data.join("target_test.jsonl")),
        "--out",
        s(&report_dir),
        "--range",
        "0-30:5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = EvalReport::read_json(&report_dir.join("report.json")).unwrap();
    assert_eq!(report.pck.len(), 7);
    assert!(report_dir.join("pck.csv").is_file());

    let csv = dir.path().join("proj.csv");
    let out = awh(&[
        "project",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&data.join("source_train.jsonl")),
        "--target",
        s(&data.join("target_train.jsonl")),
        "--out",
        s(&csv),
        "--samples",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 11);
}
