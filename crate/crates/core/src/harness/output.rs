use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::{ExperimentResult, InferenceRow};
use super::{HarnessError, Result};
use crate::ledger::Digest;
use crate::protocol::ProtocolEvent;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHAIN_FILE: &str = "chain.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const INFERENCE_FILE: &str = "inference.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize rows as CSV with a header. An empty row list still gets the
/// header of `T` when `empty_header` is given.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// All chain sections of the decentralized runs, in run order.
pub fn chain_dump(results: &[ExperimentResult]) -> String {
    results
        .iter()
        .flat_map(|r| &r.models)
        .filter_map(|m| m.chain.as_ref())
        .map(|(c, reg)| c.dump(reg))
        .collect()
}

#[derive(Serialize)]
struct TaggedEvent<'a> {
    run: usize,
    #[serde(flatten)]
    event: &'a ProtocolEvent,
}

pub fn events_jsonl(results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    for (run, r) in results.iter().enumerate() {
        for event in &r.events {
            out.push_str(&serde_json::to_string(&TaggedEvent { run, event }).expect("event serializes"));
            out.push('\n');
        }
    }
    out
}

/// Plain-text record of how the outputs were produced.
pub fn manifest(command: &str, results: &[ExperimentResult], files: &[(&str, &str)]) -> String {
    let mut m = String::new();
    writeln!(m, "dfloc {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(m, "command: {command}").unwrap();
    writeln!(m, "runs: {}", results.len()).unwrap();
    if let Some(first) = results.first() {
        writeln!(m, "dataset: {}", first.data_description).unwrap();
        writeln!(m, "train_samples: {}", first.train_samples).unwrap();
        writeln!(m, "test_samples: {}", first.test_samples).unwrap();
    }
    for (i, r) in results.iter().enumerate() {
        let s = &r.config.seeds;
        writeln!(
            m,
            "run {i}: system={} kind={} malicious={} sigma={} faulty={} seeds master={} data={} protocol={}",
            r.config.system,
            r.config.kind.as_str(),
            r.config.attack.malicious_count,
            r.config.attack.sigma,
            r.config.faults.count,
            s.master,
            s.data_seed(),
            s.protocol_seed()
        )
        .unwrap();
    }
    for (name, content) in files {
        writeln!(m, "file {name} sha256={}", Digest::of(content.as_bytes())).unwrap();
    }
    if !results.iter().any(|r| r.models.iter().any(|x| x.chain.is_some())) {
        writeln!(m, "chain: none (centralized runs keep no ledger)").unwrap();
    }
    if let Some(first) = results.first() {
        writeln!(m, "\n[config]").unwrap();
        m.push_str(&first.config.to_toml_string());
    }
    m
}

/// Write metrics, summary, chain (when any run kept one), events and the
/// manifest into `dir`. Returns the written paths.
pub fn write_outputs(dir: &Path, command: &str, results: &[ExperimentResult], with_inference: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rows: Vec<_> = results.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let summaries: Vec<_> = results.iter().map(|r| r.summary.clone()).collect();
    let mut files: Vec<(&str, String)> = vec![(METRICS_FILE, csv_string(&rows)?), (SUMMARY_FILE, csv_string(&summaries)?)];
    let chain = chain_dump(results);
    if !chain.is_empty() {
        files.push((CHAIN_FILE, chain));
    }
    if with_inference {
        let inf: Vec<InferenceRow> = results.iter().map(InferenceRow::from_result).collect();
        files.push((INFERENCE_FILE, csv_string(&inf)?));
    }
    files.push((EVENTS_FILE, events_jsonl(results)));
    let listed: Vec<(&str, &str)> = files.iter().map(|(n, c)| (*n, c.as_str())).collect();
    let man = manifest(command, results, &listed);
    files.push((MANIFEST_FILE, man));

    let mut written = Vec::new();
    for (name, content) in files {
        let path = dir.join(name);
        fs::write(&path, content).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
