use std::path::Path;
use std::process::{Command, Output};

use msr_core::config::{MockKind, RunConfig};
use msr_core::gateway::{HttpBackendConfig, RoleTag};
use msr_core::synthetic::{fixture_config, SyntheticSpec};

fn msr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msr"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, config: &RunConfig) -> String {
    let path = dir.join("msr.toml");
    std::fs::write(&path, toml::to_string(config).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn fixture(dir: &Path) -> RunConfig {
    let spec = SyntheticSpec { users: 8, items: 24, min_len: 4, max_len: 6, ..Default::default() };
    let mut config = fixture_config(dir, &spec, MockKind::HashText).unwrap();
    config.mock.enabled = false;
    config.split.n_folds = 2;
    config.split.eval_ratio = 6;
    config
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[split]\nn_folds = 1\n").unwrap();
    let out = msr(dir.path(), &["--config", "bad.toml", "ingest"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("typo.toml"), "[split]\nnfolds = 3\n").unwrap();
    let out = msr(dir.path(), &["--config", "typo.toml", "ingest"]);
    assert_eq!(out.status.code(), Some(2));

    let out = msr(dir.path(), &["sweep", "temperature", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &fixture(dir.path()));
    assert_eq!(msr(dir.path(), &["--config", &config, "--mock", "ingest"]).status.code(), Some(0));
    let out = msr(dir.path(), &["--config", &config, "--mock", "score"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infer-preferences"));
}

#[test]
fn mock_run_prints_report_and_reuses_stages() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &fixture(dir.path()));
    // msr.toml in the working directory is picked up without --config.
    let args = ["--mock", "--mock-behavior", "oracle-yes", "run"];
    let out = msr(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("AUC"), "{text}");
    assert!(text.contains("evaluate: done"), "{text}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert!(manifest["stages"]["score"].is_object());

    let again = stdout(&msr(dir.path(), &args));
    assert!(again.contains("evaluate: reused (0 backend calls"), "{again}");

    let out = msr(dir.path(), &["--mock", "--mock-behavior", "oracle-yes", "eval-loss", "--backend", "mock"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("overall:"));
    // Another behavior fingerprints different upstream stages that were never built.
    let out = msr(dir.path(), &["--mock", "--mock-behavior", "uniform-logprob", "eval-loss"]);
    assert_eq!(out.status.code(), Some(3));
    let out = msr(dir.path(), &["--mock", "--backend", "other", "eval-loss"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &fixture(dir.path()));
    let out = msr(dir.path(), &["--config", &config, "--mock", "sweep", "block_size", "1", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = std::fs::read_to_string(dir.path().join("out/sweeps/block_size.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn unreachable_backend_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = fixture(dir.path());
    let mut backend = HttpBackendConfig::new("http://127.0.0.1:9", "m");
    backend.retry.attempts = 1;
    backend.timeout_secs = 5;
    config.backends.insert("local".into(), backend);
    for role in RoleTag::ALL {
        config.roles.insert(role, "local".into());
    }
    let config = write_config(dir.path(), &config);
    assert_eq!(msr(dir.path(), &["--config", &config, "ingest"]).status.code(), Some(0));
    let out = msr(dir.path(), &["--config", &config, "summarize-items"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
