use std::path::Path;
use std::process::{Command, Output};

fn predbias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_predbias"))
        .args(args)
        .env("PREDBIAS_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) -> String {
    let fixture = dir.join("fixture");
    let out = predbias(&[
        "--out",
        fixture.to_str().unwrap(),
        "synth",
        "--relations",
        "200",
        "--na-pairs",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let config = String::from_utf8(out.stdout).unwrap().trim().to_string();
    assert!(Path::new(&config).is_file());
    config
}

#[test]
fn full_run_writes_the_named_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out_dir = dir.path().join("out");
    let out = predbias(&["--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "dataset.enhanced.jsonl",
        "plan.jsonl",
        "prototypes.csv",
        "similarity.csv",
        "filtration.csv",
        "index.txt",
        "report.csv",
        "summary.json",
    ] {
        assert!(out_dir.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn stages_run_individually_and_report_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out_dir = dir.path().join("out");
    let out_str = out_dir.to_str().unwrap();

    let out = predbias(&["--config", &config, "--out", out_str, "transfer"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("transfer") && err.contains("predicates.json"), "{err}");

    for stage in ["ingest", "identify", "embed", "train", "prototypes"] {
        let out = predbias(&["--config", &config, "--out", out_str, stage]);
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = predbias(&["--config", &config, "--out", out_str, "--stage", "transfer"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("plan.jsonl").is_file());

    let out = predbias(&["--config", &config, "--out", out_str, "--stage", "audit", "resample"]);
    assert!(!out.status.success(), "conflicting stage selection must fail");
}

#[test]
fn seed_override_is_reproducible_and_effective() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = predbias(&["--config", &config, "--out", out_dir.to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(out_dir.join("index.txt")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "2");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, r#"{"inputs": {}}"#).unwrap();
    let out = predbias(&[
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}
