use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, KindSelection};
use super::{HarnessError, Result};
use crate::baseline::{infer_cfl, CflState};
use crate::dataset::{
    generate_synthetic, load_ujiindoorloc_files, partition_clients, split_train_test, ClientShard, Dataset,
};
use crate::ledger::{Chain, KeyRegistry};
use crate::model::{error_3d, ModelKind, ParamVector, Prediction, Task};
use crate::protocol::{draw_faulty, infer_dfl, ProtocolEvent, RoundOutcome, System};
use crate::rng;

/// Wall clock for the summary's `wall_time_s`. Reads zero on wasm32, which has
/// no monotonic clock in std.
#[derive(Clone, Copy, Debug)]
pub struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn elapsed_s(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Global train/test split and the client shards built from the training part.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    /// Distinct (building, floor) labels of the training data.
    pub labels: Vec<(u8, u8)>,
    pub description: String,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (all, description) = match cfg.dataset.source {
        DataSource::Synthetic => {
            let s = &cfg.dataset.synthetic;
            (
                generate_synthetic(s)?,
                format!(
                    "synthetic ({} samples, {} buildings x {} floors, {} APs, noise {} dB, seed {})",
                    s.num_samples, s.num_buildings, s.num_floors, s.num_aps, s.noise_db, s.seed
                ),
            )
        }
        DataSource::Ujiindoorloc => {
            let names: Vec<String> = cfg.dataset.paths.iter().map(|p| p.display().to_string()).collect();
            (load_ujiindoorloc_files(&cfg.dataset.paths)?, format!("ujiindoorloc ({})", names.join(", ")))
        }
    };
    let data_seed = cfg.seeds.data_seed();
    let (train, test) = split_train_test(&all, cfg.dataset.test_fraction, data_seed)?;
    let shards = partition_clients(&train, cfg.device_count, cfg.dataset.local_test_fraction, data_seed)?;
    let labels = train.label_set();
    Ok(PreparedData {
        train,
        test,
        shards,
        labels,
        description,
    })
}

/// Devices that act maliciously, drawn once per experiment from the protocol seed.
pub fn malicious_devices(cfg: &ExperimentConfig) -> BTreeSet<u32> {
    let ids: Vec<u32> = (0..cfg.device_count as u32).collect();
    let mut r = rng::stream(cfg.seeds.protocol_seed(), "malicious", &[]);
    ids.choose_multiple(&mut r, cfg.attack.malicious_count).copied().collect()
}

/// A trained global model with what is needed to run inference on it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub task: Task,
    pub global: ParamVector,
    pub rounds: u64,
    pub device_ids: Vec<u32>,
    /// The central server's id in the fault draw (centralized runs).
    pub server_id: u32,
    /// Chain and key registry of a decentralized run.
    pub chain: Option<(Chain, KeyRegistry)>,
    /// Per-round protocol outcomes of a decentralized run.
    pub outcomes: Vec<RoundOutcome>,
}

/// One line of `metrics.csv`: a round of one kind, or the run's summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub row_type: &'static str,
    pub system: System,
    pub kind: &'static str,
    pub round: u64,
    pub seed: u64,
    pub malicious_count: usize,
    pub sigma: f64,
    pub faulty_count: usize,
    pub accuracy: Option<f64>,
    pub error_distance_m: Option<f64>,
    pub error_3d_m: Option<f64>,
    pub approved_updates: Option<usize>,
    pub rejected_updates: Option<usize>,
    pub round_aborted: Option<bool>,
}

/// Evaluation of the final models, with and without faults at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseMetrics {
    pub accuracy: Option<f64>,
    pub error_distance_m: Option<f64>,
    pub error_3d_m: Option<f64>,
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub system: System,
    pub kind: &'static str,
    pub seed: u64,
    pub malicious_count: usize,
    pub sigma: f64,
    pub faulty_count: usize,
    pub rounds_bfc: Option<u64>,
    pub rounds_llr: Option<u64>,
    pub accuracy: Option<f64>,
    pub error_distance_m: Option<f64>,
    pub error_3d_m: Option<f64>,
    pub inference_trials: usize,
    pub inference_accuracy: Option<f64>,
    pub inference_error_distance_m: Option<f64>,
    pub inference_error_3d_m: Option<f64>,
    pub aborted_rounds: usize,
    pub poisoned_rejected_frac: Option<f64>,
    pub honest_approved_frac: Option<f64>,
    pub chain_blocks: usize,
    pub total_stake: u64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub data_description: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub rows: Vec<MetricsRow>,
    pub summary: SummaryRow,
    pub models: Vec<TrainedModel>,
    pub events: Vec<ProtocolEvent>,
}

impl ExperimentResult {
    pub fn model(&self, kind: ModelKind) -> Option<&TrainedModel> {
        self.models.iter().find(|m| m.kind == kind)
    }

    /// Final metrics without inference faults.
    pub fn training_metrics(&self) -> PhaseMetrics {
        PhaseMetrics {
            accuracy: self.summary.accuracy,
            error_distance_m: self.summary.error_distance_m,
            error_3d_m: self.summary.error_3d_m,
        }
    }

    /// Final metrics with the configured faults also active at inference.
    pub fn inference_metrics(&self) -> PhaseMetrics {
        PhaseMetrics {
            accuracy: self.summary.inference_accuracy,
            error_distance_m: self.summary.inference_error_distance_m,
            error_3d_m: self.summary.inference_error_3d_m,
        }
    }
}

fn base_row(cfg: &ExperimentConfig, row_type: &'static str, kind: &'static str, round: u64) -> MetricsRow {
    MetricsRow {
        row_type,
        system: cfg.system,
        kind,
        round,
        seed: cfg.seeds.master,
        malicious_count: cfg.attack.malicious_count,
        sigma: cfg.attack.sigma,
        faulty_count: cfg.faults.count,
        accuracy: None,
        error_distance_m: None,
        error_3d_m: None,
        approved_updates: None,
        rejected_updates: None,
        round_aborted: None,
    }
}

fn evaluate(task: &Task, global: &ParamVector, test: &Dataset) -> Result<f64> {
    Ok(match task.kind() {
        ModelKind::Bfc => crate::model::evaluate_bfc(global, test, task)?,
        ModelKind::Llr => crate::model::evaluate_llr(global, test, task)?,
    })
}

fn with_metric(mut row: MetricsRow, kind: ModelKind, value: f64) -> MetricsRow {
    match kind {
        ModelKind::Bfc => row.accuracy = Some(value),
        ModelKind::Llr => row.error_distance_m = Some(value),
    }
    row
}

fn train_kind(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    malicious: &BTreeSet<u32>,
    kind: ModelKind,
    rows: &mut Vec<MetricsRow>,
    events: &mut Vec<ProtocolEvent>,
) -> Result<TrainedModel> {
    let spec = cfg.kind_config(kind).spec(kind);
    let task = Task::new(&spec, data.train.coord_bounds())?;
    let seed = cfg.seeds.protocol_seed();
    let init = task.init_params(&mut rng::stream(seed, "init", &[kind as u64]));
    let params = cfg.protocol_params(kind);
    let rounds = cfg.rounds(kind);
    let device_ids: Vec<u32> = data.shards.iter().map(|s| s.client_id).collect();
    let kind_name = kind.as_str();

    match cfg.system {
        System::Dfl => {
            let mut state =
                crate::protocol::DflState::new(task.clone(), data.shards.clone(), malicious, params, seed, init)?;
            let mut outcomes = Vec::with_capacity(rounds as usize);
            for _ in 0..rounds {
                let out = state.run_round()?;
                let metric = evaluate(&task, state.global(), &data.test)?;
                let mut row = with_metric(base_row(cfg, "round", kind_name, out.round), kind, metric);
                row.approved_updates = Some(out.updates.iter().filter(|u| u.included).count());
                row.rejected_updates = Some(out.updates.iter().filter(|u| !u.included).count());
                row.round_aborted = Some(out.aborted.is_some());
                rows.push(row);
                events.extend(state.take_events());
                outcomes.push(out);
            }
            Ok(TrainedModel {
                kind,
                task,
                global: state.global().clone(),
                rounds,
                device_ids,
                server_id: cfg.device_count as u32,
                chain: Some((state.chain().clone(), state.registry().clone())),
                outcomes,
            })
        }
        System::Cfl => {
            let mut state = CflState::new(task.clone(), data.shards.clone(), malicious, params, seed, init)?;
            for _ in 0..rounds {
                let out = state.run_round()?;
                let metric = evaluate(&task, state.global(), &data.test)?;
                let mut row = with_metric(base_row(cfg, "round", kind_name, out.round), kind, metric);
                row.round_aborted = Some(out.server_faulty);
                rows.push(row);
                events.extend(state.take_events());
            }
            Ok(TrainedModel {
                kind,
                task,
                global: state.global().clone(),
                rounds,
                device_ids,
                server_id: state.server_id(),
                chain: None,
                outcomes: Vec::new(),
            })
        }
    }
}

/// Mean final metrics over `trials` passes of the test set, each sample
/// facing a fresh draw of `faulty_count` faulty entities. Decentralized
/// inference takes the median over all devices; centralized inference fails
/// whenever the server is among the faulty. Both models of a 3D run see the
/// same faulty set per sample. With no faults this is the plain evaluation.
pub fn evaluate_inference_phase(
    models: &[TrainedModel],
    system: System,
    test: &Dataset,
    labels: &[(u8, u8)],
    faulty_count: usize,
    trials: usize,
    seed: u64,
) -> Result<PhaseMetrics> {
    if test.is_empty() {
        return Err(HarnessError::Model(crate::model::ModelError::EmptyTestSet));
    }
    let Some(first) = models.first() else {
        return Ok(PhaseMetrics::default());
    };
    let trials = if faulty_count == 0 { 1 } else { trials.max(1) };
    let bfc = models.iter().find(|m| m.kind == ModelKind::Bfc);
    let llr = models.iter().find(|m| m.kind == ModelKind::Llr);
    let mut population = first.device_ids.clone();
    if system == System::Cfl {
        population.push(first.server_id);
    }
    if faulty_count > population.len() {
        return Err(HarnessError::Config {
            path: "faults.count".into(),
            reason: format!("{faulty_count} faulty entities but only {} exist", population.len()),
        });
    }

    let (mut correct, mut err2, mut err3) = (0usize, 0.0, 0.0);
    for trial in 0..trials {
        for (i, s) in test.samples().iter().enumerate() {
            let mut r = rng::stream(seed, "inference", &[trial as u64, i as u64]);
            let faulty = draw_faulty(faulty_count, &population, &mut r);
            let predict = |m: &TrainedModel, r: &mut rng::SimRng| -> Result<Prediction> {
                Ok(match system {
                    System::Dfl => infer_dfl(&m.task, &m.global, &s.rss, &m.device_ids, &faulty, r)?,
                    System::Cfl => infer_cfl(&m.task, &m.global, &s.rss, faulty.contains(&m.server_id), labels, r)?,
                })
            };
            let bf = bfc.map(|m| predict(m, &mut r)).transpose()?;
            let ll = llr.map(|m| predict(m, &mut r)).transpose()?;
            if let Some(Prediction::Bfc { building, floor }) = bf {
                if building == s.building_id && floor == s.floor_id {
                    correct += 1;
                }
            }
            if let Some(Prediction::Llr { latitude, longitude }) = ll {
                err2 += (latitude - s.latitude).hypot(longitude - s.longitude);
                if let Some(Prediction::Bfc { building, floor }) = bf {
                    err3 += error_3d((building, floor), (latitude, longitude), s);
                }
            }
        }
    }
    let n = (trials * test.len()) as f64;
    Ok(PhaseMetrics {
        accuracy: bfc.map(|_| correct as f64 / n),
        error_distance_m: llr.map(|_| err2 / n),
        error_3d_m: (bfc.is_some() && llr.is_some()).then(|| err3 / n),
    })
}

/// Sample-wise 3D errors of a BFC and an LLR model with their 2D errors.
pub fn errors_3d(bfc: &TrainedModel, llr: &TrainedModel, test: &Dataset) -> Result<Vec<(f64, f64)>> {
    test.samples()
        .iter()
        .map(|s| {
            let Prediction::Bfc { building, floor } = bfc.task.predict(&bfc.global, &s.rss)? else {
                unreachable!("BFC task decodes to a class");
            };
            let Prediction::Llr { latitude, longitude } = llr.task.predict(&llr.global, &s.rss)? else {
                unreachable!("LLR task decodes to coordinates");
            };
            let e2 = (latitude - s.latitude).hypot(longitude - s.longitude);
            Ok((error_3d((building, floor), (latitude, longitude), s), e2))
        })
        .collect()
}

/// Run one experiment: train every selected kind, evaluate each round on the
/// global test set and summarize.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Stopwatch::start();
    let data = prepare_data(cfg)?;
    run_experiment_on(cfg, &data, start)
}

/// [`run_experiment`] on already prepared data.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &PreparedData, start: Stopwatch) -> Result<ExperimentResult> {
    cfg.validate()?;
    let malicious = malicious_devices(cfg);
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let mut models = Vec::new();
    for &kind in cfg.kind.kinds() {
        log::info!("{} {} training for {} rounds", cfg.system, kind, cfg.rounds(kind));
        models.push(train_kind(cfg, data, &malicious, kind, &mut rows, &mut events)?);
    }

    let training = evaluate_inference_phase(&models, cfg.system, &data.test, &data.labels, 0, 1, 0)?;
    let inference_faults = if cfg.faults.affects_inference() { cfg.faults.count } else { 0 };
    let inference = evaluate_inference_phase(
        &models,
        cfg.system,
        &data.test,
        &data.labels,
        inference_faults,
        cfg.inference.trials,
        cfg.seeds.protocol_seed(),
    )?;

    let final_round = models.iter().map(|m| m.rounds).max().unwrap_or(0);
    let mut summary_row = base_row(cfg, "summary", cfg.kind.as_str(), final_round);
    summary_row.accuracy = training.accuracy;
    summary_row.error_distance_m = training.error_distance_m;
    summary_row.error_3d_m = training.error_3d_m;
    rows.push(summary_row);

    let outcomes: Vec<&RoundOutcome> = models.iter().flat_map(|m| &m.outcomes).collect();
    let (mut poisoned, mut poisoned_rejected, mut honest, mut honest_approved) = (0usize, 0usize, 0usize, 0usize);
    for u in outcomes.iter().flat_map(|o| &o.updates) {
        if u.malicious {
            poisoned += 1;
            poisoned_rejected += usize::from(!u.included);
        } else {
            honest += 1;
            honest_approved += usize::from(u.included);
        }
    }
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let aborted = rows.iter().filter(|r| r.round_aborted == Some(true)).count();
    let (chain_blocks, total_stake) = models
        .iter()
        .filter_map(|m| m.chain.as_ref())
        .fold((0, 0), |(n, s), (c, _)| (n + c.len(), s + c.replay_stakes().total()));
    let rounds_of = |k: ModelKind| cfg.kind.kinds().contains(&k).then(|| cfg.rounds(k));

    let summary = SummaryRow {
        system: cfg.system,
        kind: cfg.kind.as_str(),
        seed: cfg.seeds.master,
        malicious_count: cfg.attack.malicious_count,
        sigma: cfg.attack.sigma,
        faulty_count: cfg.faults.count,
        rounds_bfc: rounds_of(ModelKind::Bfc),
        rounds_llr: rounds_of(ModelKind::Llr),
        accuracy: training.accuracy,
        error_distance_m: training.error_distance_m,
        error_3d_m: training.error_3d_m,
        inference_trials: if inference_faults > 0 { cfg.inference.trials } else { 1 },
        inference_accuracy: inference.accuracy,
        inference_error_distance_m: inference.error_distance_m,
        inference_error_3d_m: inference.error_3d_m,
        aborted_rounds: aborted,
        poisoned_rejected_frac: frac(poisoned_rejected, poisoned),
        honest_approved_frac: frac(honest_approved, honest),
        chain_blocks,
        total_stake,
        wall_time_s: start.elapsed_s(),
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        data_description: data.description.clone(),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        rows,
        summary,
        models,
        events,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Malicious,
    Faulty,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Malicious => "malicious",
            SweepAxis::Faulty => "faulty",
        }
    }
}

/// One experiment per `(system, value)`, in that order. Data is prepared once.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    systems: &[System],
) -> Result<Vec<ExperimentResult>> {
    base.validate()?;
    let data = prepare_data(base)?;
    let mut out = Vec::with_capacity(values.len() * systems.len());
    for &system in systems {
        for &v in values {
            let mut cfg = base.clone();
            cfg.system = system;
            match axis {
                SweepAxis::Malicious => cfg.attack.malicious_count = v,
                SweepAxis::Faulty => cfg.faults.count = v,
            }
            cfg.validate()?;
            log::info!("sweep point: {system} {}={v}", axis.as_str());
            out.push(run_experiment_on(&cfg, &data, Stopwatch::start())?);
        }
    }
    Ok(out)
}

/// One line of `inference.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferenceRow {
    pub system: System,
    pub kind: &'static str,
    pub seed: u64,
    pub faulty_count: usize,
    pub trials: usize,
    pub training_accuracy: Option<f64>,
    pub training_error_distance_m: Option<f64>,
    pub training_error_3d_m: Option<f64>,
    pub inference_accuracy: Option<f64>,
    pub inference_error_distance_m: Option<f64>,
    pub inference_error_3d_m: Option<f64>,
}

impl InferenceRow {
    pub fn from_result(r: &ExperimentResult) -> Self {
        let s = &r.summary;
        InferenceRow {
            system: s.system,
            kind: s.kind,
            seed: s.seed,
            faulty_count: s.faulty_count,
            trials: s.inference_trials,
            training_accuracy: s.accuracy,
            training_error_distance_m: s.error_distance_m,
            training_error_3d_m: s.error_3d_m,
            inference_accuracy: s.inference_accuracy,
            inference_error_distance_m: s.inference_error_distance_m,
            inference_error_3d_m: s.inference_error_3d_m,
        }
    }
}

/// The inference-phase study: for each faulty count and system, train with
/// that many faults per round and evaluate both without and with faults at
/// inference.
pub fn run_inference_study(
    base: &ExperimentConfig,
    faulty_counts: &[usize],
    systems: &[System],
) -> Result<Vec<ExperimentResult>> {
    let mut cfg = base.clone();
    cfg.faults.phase = crate::protocol::FaultPhase::Both;
    run_sweep(&cfg, SweepAxis::Faulty, faulty_counts, systems)
}

impl KindSelection {
    pub fn includes(self, kind: ModelKind) -> bool {
        self.kinds().contains(&kind)
    }
}
