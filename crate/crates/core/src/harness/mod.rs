//! Configuration-driven experiment runner: single runs, attack and fault
//! sweeps, the inference-phase fault study, CSV outputs and chain audits.

mod config;
mod output;
mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    AttackConfig, DataSource, DatasetConfig, ExperimentConfig, HyperOverrides, InferenceConfig, KindConfig,
    KindSelection, ModelOverrides, SeedConfig, Thresholds,
};
pub use output::{
    chain_dump, csv_string, events_jsonl, manifest, write_outputs, CHAIN_FILE, EVENTS_FILE, INFERENCE_FILE,
    MANIFEST_FILE, METRICS_FILE, SUMMARY_FILE,
};
pub use run::{
    errors_3d, evaluate_inference_phase, malicious_devices, prepare_data, run_experiment, run_experiment_on,
    run_inference_study, run_sweep, ExperimentResult, InferenceRow, MetricsRow, PhaseMetrics, PreparedData,
    Stopwatch, SummaryRow, SweepAxis, TrainedModel,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("config parse error: {0}")]
    ConfigSyntax(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
    #[error(transparent)]
    Ledger(#[from] crate::ledger::LedgerError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Audit a chain dump file.
pub fn audit_file(path: &std::path::Path) -> Result<crate::ledger::AuditReport> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(crate::ledger::audit_dump(&text)?)
}
