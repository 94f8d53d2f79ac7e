use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str =
    r#"{"model": {"hidden": [8], "aux_hidden": 8}, "pretrain": {"epochs": 1}, "seeds": [0], "output_dir": "out"}"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade-tta")).current_dir(dir).args(args).output().expect("spawn cli")
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("cfg.json"), CONFIG).unwrap();
    d
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn print_config_round_trips() {
    let d = workdir();
    let o = cli(d.path(), &["--config", "cfg.json", "--print-config"]);
    assert!(o.status.success());
    let cfg = cascade_tta::harness::ExperimentConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg.model.hidden, vec![8]);
}

#[test]
fn usage_errors_exit_2() {
    let d = workdir();
    let o = cli(d.path(), &["--config", "cfg.json", "pretrain", "--method", "maml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("valid: meta"), "{}", stderr(&o));

    std::fs::write(d.path().join("bad.json"), r#"{"adapt": {"online_lrr": 1}}"#).unwrap();
    let o = cli(d.path(), &["--config", "bad.json", "verify", "bn"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("adapt.online_lrr"), "{}", stderr(&o));

    let o = cli(d.path(), &["--config", "missing.json", "verify", "bn"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_stream_adapt_flow() {
    let d = workdir();
    let p = d.path();
    let run = |args: &[&str]| {
        let o = cli(p, &[&["--config", "cfg.json"], args].concat());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["pretrain", "--method", "meta", "--seed", "1"]);
    run(&["pretrain", "--method", "ttt", "--seed", "1"]);
    assert!(p.join("out/meta_s1.ckpt").exists() && p.join("out/meta_s1.report.csv").exists());
    run(&["make-stream", "--seed", "1", "--setup", "gradual", "--out", "stream.json"]);
    let out =
        run(&["adapt", "--ckpt", "out/meta_s1.ckpt", "--stream", "stream.json", "--method", "ours", "--no-matrix"]);
    assert!(out.contains("over 45 domains"), "{out}");
    for ext in ["trace.csv", "trace.json", "metrics.json", "metrics.csv"] {
        assert!(p.join(format!("out/ours_s1_b32.{ext}")).exists(), "{ext}");
    }
    assert!(p.join("out/ours_s1_b32_snapshots/domain_044.ckpt").exists());
    let first = std::fs::read(p.join("out/ours_s1_b32.trace.csv")).unwrap();
    run(&[
        "adapt",
        "--ckpt",
        "out/meta_s1.ckpt",
        "--stream",
        "stream.json",
        "--method",
        "ours",
        "--no-matrix",
        "--no-snapshots",
    ]);
    assert_eq!(first, std::fs::read(p.join("out/ours_s1_b32.trace.csv")).unwrap());

    // cascade-only method on the parallel checkpoint
    let o = cli(
        p,
        &["--config", "cfg.json", "adapt", "--ckpt", "out/ttt_s1.ckpt", "--stream", "stream.json", "--method", "ours"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn verify_suites_pass() {
    let d = workdir();
    for suite in ["bn", "metrics"] {
        let o = cli(d.path(), &["verify", suite]);
        assert!(o.status.success(), "{suite}: {}", String::from_utf8_lossy(&o.stdout));
    }
    assert_eq!(cli(d.path(), &["verify", "nope"]).status.code(), Some(2));
}
