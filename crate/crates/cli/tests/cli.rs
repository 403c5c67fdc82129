use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
kind = "bfc"
[dataset.synthetic]
num_samples = 400
[bfc]
rounds = 2
hyper = { local_epochs = 1, batch_size = 10 }
[llr]
rounds = 2
hyper = { local_epochs = 1, batch_size = 10 }
"#;

fn dfloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfloc")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_outputs_and_audit_checks_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = dfloc(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7", "--kind", "3d"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "summary.csv", "chain.txt", "manifest.txt", "events.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("master=7"));

    let chain = out.join("chain.txt");
    let o = dfloc(&["audit", chain.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("chain bfc"));

    let mut bytes = fs::read(&chain).unwrap();
    let i = bytes.len() / 2;
    bytes[i] = if bytes[i] == b'7' { b'8' } else { b'7' };
    fs::write(&chain, bytes).unwrap();
    let o = dfloc(&["audit", chain.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("audit failed"));
}

#[test]
fn centralized_run_has_no_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = dfloc(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--system", "cfl", "--kind", "llr"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("chain.txt").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("CFL,llr,"));
}

#[test]
fn sweep_and_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = dfloc(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--axis", "faulty", "--values", "0,2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    // 2 systems x 2 values x (2 rounds + summary), plus the header.
    assert_eq!(metrics.lines().count(), 1 + 2 * 2 * 3);

    let out = dir.path().join("inf");
    let o = dfloc(&[
        "infer-eval",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--faulty-counts",
        "0,3",
        "--trials",
        "2",
        "--system",
        "dfl",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let inf = fs::read_to_string(out.join("inference.csv")).unwrap();
    assert_eq!(inf.lines().count(), 3);
}

#[test]
fn bad_configs_are_rejected_with_a_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[attack]\nmalicous_count = 3\n");
    let o = dfloc(&["run", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field `malicous_count`"));

    let cfg = write_config(dir.path(), "[roles]\nworkers = 2\n");
    let o = dfloc(&["run", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("`roles`"));
}
