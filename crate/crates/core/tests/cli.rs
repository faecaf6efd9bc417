use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use refseg::metrics::MetricsReport;

fn refseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refseg")).args(args).output().expect("run refseg")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

const SMALL: &str = "scenes=4\nholdout=1\nsteps=3\nbatch_size=1\nalign_batch=4\n";

#[test]
fn gen_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ck, report, mask, log) = (
        dir.path().join("small.cfg"),
        dir.path().join("data.epcd"),
        dir.path().join("model.ck"),
        dir.path().join("report.txt"),
        dir.path().join("mask.pgm"),
        dir.path().join("train.jsonl"),
    );
    fs::write(&cfg, SMALL).unwrap();
    let out = refseg(&["gen", "--config", p(&cfg), "--out", p(&data), "--seed", "5"]);
    assert!(out.status.success(), "{}", error_line(&out));

    let out = refseg(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck), "--mode", "text", "--log", p(&log)]);
    assert!(out.status.success(), "{}", error_line(&out));
    let lines = fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert_eq!(first["modes"][0], "text_only");

    // text-trained checkpoint evaluated with audio expressions
    let out = refseg(&["eval", "--data", p(&data), "--ckpt", p(&ck), "--modality", "audio", "--report", p(&report)]);
    assert!(out.status.success(), "{}", error_line(&out));
    let r = MetricsReport::parse(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.jf, (r.j + r.f) / 2.0);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().all(|l| l.split_once('=').unwrap().1.split_once('.').unwrap().1.len() == 6));

    let out = refseg(&["infer", "--ckpt", p(&ck), "--data", p(&data), "--sample", "3", "--expr-id", "0", "--out-mask", p(&mask), "--frame", "2"]);
    assert!(out.status.success(), "{}", error_line(&out));
    let pgm = fs::read(&mask).unwrap();
    assert!(pgm.starts_with(b"P5\n24 24\n255\n"));
    assert_eq!(pgm.len(), 13 + 576);
    assert!(pgm[13..].iter().all(|&b| b == 0 || b == 255));

    let out = refseg(&["infer", "--ckpt", p(&ck), "--data", p(&data), "--sample", "9", "--expr-id", "0", "--out-mask", p(&mask)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error code=2 kind=usage msg=\"sample 9 out of range"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = refseg(&["gen", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error code=2 kind=usage msg="));

    let missing = dir.path().join("missing.epcd");
    let out = refseg(&["eval", "--data", p(&missing), "--ckpt", p(&missing), "--modality", "both", "--report", "r.txt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).starts_with("error code=3 kind=io"));

    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "scenes=2\nholdout=1\nsteps=1\nbatch_size=1\nalign_batch=2\n").unwrap();
    let data = dir.path().join("d.epcd");
    let ck = dir.path().join("m.ck");
    assert!(refseg(&["gen", "--config", p(&cfg), "--out", p(&data)]).status.success());
    assert!(refseg(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck), "--mode", "mix"]).status.success());
    // bump the format version
    let mut bytes = fs::read(&ck).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&ck, bytes).unwrap();
    let out = refseg(&["eval", "--data", p(&data), "--ckpt", p(&ck), "--modality", "text", "--report", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).contains("kind=format"));
    assert!(error_line(&out).contains("version 99"));

    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "heads=5\n").unwrap();
    let out = refseg(&["gen", "--config", p(&bad_cfg), "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
}
