//! Centralized federated learning reference: one server aggregates every
//! client upload with plain FedAvg, no filtering. The server is part of the
//! fault draw; a faulty server halts the round.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::ClientShard;
use crate::model::{fedavg, inject_gaussian_noise, train_local, uniform_in_init_range, ParamVector, Prediction, Task};
use crate::protocol::{Behavior, Device, ProtocolError, ProtocolEvent, ProtocolParams, Result, System};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerStatus {
    Up,
    Faulted,
}

#[derive(Clone, Debug)]
pub struct CentralServer {
    pub global: ParamVector,
    pub status: ServerStatus,
}

impl CentralServer {
    pub fn new(global: ParamVector) -> Self {
        CentralServer {
            global,
            status: ServerStatus::Up,
        }
    }
}

/// One centralized round over `clients`. Malicious clients add noise to their
/// upload, faulty clients upload uniform values over the initialization range,
/// and a faulted server leaves the global model untouched.
#[allow(clippy::too_many_arguments)]
pub fn cfl_round(
    server: &mut CentralServer,
    clients: &[&Device],
    task: &Task,
    params: &ProtocolParams,
    faulty_clients: &BTreeSet<u32>,
    server_faulty: bool,
    round: u64,
) -> Result<()> {
    if server_faulty {
        server.status = ServerStatus::Faulted;
        return Ok(());
    }
    server.status = ServerStatus::Up;
    let mut uploads = Vec::with_capacity(clients.len());
    for c in clients {
        let upload = if faulty_clients.contains(&c.device_id) {
            uniform_in_init_range(task.network(), task.fingerprint(), &mut c.rng("fault", round))
        } else {
            let trained = train_local(&server.global, &c.shard.train, &params.hyper, task, &mut c.rng("train", round))?;
            if c.is_malicious() {
                inject_gaussian_noise(&trained, params.sigma, &mut c.rng("noise", round))
            } else {
                trained
            }
        };
        let weight = if params.weighted_fedavg {
            c.shard.train.len() as f64
        } else {
            1.0
        };
        uploads.push((upload, weight));
    }
    if uploads.is_empty() {
        return Ok(());
    }
    let refs: Vec<(&ParamVector, f64)> = uploads.iter().map(|(p, w)| (p, *w)).collect();
    server.global = fedavg(&refs)?;
    Ok(())
}

/// Centralized inference. A faulty server answers uniformly at random: a
/// point within the coordinate bounds (LLR) or one of `labels` (BFC).
pub fn infer_cfl<R: Rng>(
    task: &Task,
    global: &ParamVector,
    x: &[f64],
    server_faulty: bool,
    labels: &[(u8, u8)],
    rng: &mut R,
) -> Result<Prediction> {
    if !server_faulty {
        return Ok(task.predict(global, x)?);
    }
    Ok(match task.kind() {
        crate::model::ModelKind::Llr => {
            let (latitude, longitude) = task.bounds().sample_uniform(rng);
            Prediction::Llr {
                latitude,
                longitude,
            }
        }
        crate::model::ModelKind::Bfc => {
            let &(building, floor) = labels
                .choose(rng)
                .ok_or_else(|| ProtocolError::InvalidSetup("no labels to draw a random answer from".into()))?;
            Prediction::Bfc { building, floor }
        }
    })
}

/// Full state of a centralized training run. The server id is one past the
/// largest client id and takes part in the fault draw.
#[derive(Clone, Debug)]
pub struct CflState {
    task: Task,
    devices: Vec<Device>,
    server: CentralServer,
    params: ProtocolParams,
    seed: u64,
    rounds_done: u64,
    events: Vec<ProtocolEvent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CflRoundOutcome {
    pub round: u64,
    pub server_faulty: bool,
    pub faulty_clients: BTreeSet<u32>,
}

impl CflState {
    pub fn new(
        task: Task,
        shards: Vec<ClientShard>,
        malicious: &BTreeSet<u32>,
        params: ProtocolParams,
        seed: u64,
        initial_global: ParamVector,
    ) -> Result<Self> {
        task.check(&initial_global)?;
        params.hyper.validate()?;
        if shards.is_empty() {
            return Err(ProtocolError::InvalidSetup("no clients".into()));
        }
        if params.faults.count > shards.len() + 1 {
            return Err(ProtocolError::InvalidSetup(format!(
                "{} faulty entities requested but only {} exist",
                params.faults.count,
                shards.len() + 1
            )));
        }
        let devices: Vec<Device> = shards
            .into_iter()
            .map(|s| {
                let behavior = if malicious.contains(&s.client_id) {
                    Behavior::Malicious
                } else {
                    Behavior::Honest
                };
                Device::new(s, behavior, seed)
            })
            .collect();
        Ok(CflState {
            task,
            devices,
            server: CentralServer::new(initial_global),
            params,
            seed,
            rounds_done: 0,
            events: Vec::new(),
        })
    }

    pub fn server_id(&self) -> u32 {
        self.devices.iter().map(|d| d.device_id).max().map_or(0, |m| m + 1)
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn global(&self) -> &ParamVector {
        &self.server.global
    }

    pub fn server(&self) -> &CentralServer {
        &self.server
    }

    pub fn events(&self) -> &[ProtocolEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<ProtocolEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn run_round(&mut self) -> Result<CflRoundOutcome> {
        let round = self.rounds_done + 1;
        let server_id = self.server_id();
        let mut population: Vec<u32> = self.devices.iter().map(|d| d.device_id).collect();
        population.push(server_id);
        let mut faulty = self.params.faults.training_faults(self.seed, round, &population);
        let server_faulty = faulty.remove(&server_id);
        let clients: Vec<&Device> = self.devices.iter().collect();
        cfl_round(&mut self.server, &clients, &self.task, &self.params, &faulty, server_faulty, round)?;
        self.rounds_done = round;
        self.events.push(ProtocolEvent::CflRound {
            system: System::Cfl,
            round,
            server_faulty,
            faulty_clients: faulty.iter().copied().collect(),
            malicious_clients: self.devices.iter().filter(|d| d.is_malicious()).map(|d| d.device_id).collect(),
        });
        Ok(CflRoundOutcome {
            round,
            server_faulty,
            faulty_clients: faulty,
        })
    }

    pub fn run_training(&mut self, rounds: u64) -> Result<Vec<CflRoundOutcome>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, partition_clients, Dataset, SyntheticConfig};
    use crate::ledger::{Chain, Digest, StakeLedger};
    use crate::model::{ModelKind, ModelSpec};
    use crate::protocol::{finalize_round, miner_step, worker_step, FaultPhase, FaultSchedule, ValidatorTransaction};
    use crate::rng;

    fn shards() -> (Vec<ClientShard>, Dataset) {
        let data = generate_synthetic(&SyntheticConfig {
            num_samples: 600,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        (partition_clients(&data, 20, 0.2, 9).unwrap(), data)
    }

    fn params(kind: ModelKind) -> ProtocolParams {
        let mut p = ProtocolParams::defaults_for(kind);
        p.hyper.local_epochs = 2;
        p.hyper.batch_size = 12;
        p
    }

    #[test]
    fn honest_round_matches_an_all_approved_decentralized_round() {
        let (shards, data) = shards();
        let task = Task::new(&ModelSpec::llr_default(), data.coord_bounds()).unwrap();
        let p = params(ModelKind::Llr);
        let init = task.init_params(&mut rng::stream(1, "init", &[]));
        let devices: Vec<Device> = shards.into_iter().map(|s| Device::new(s, Behavior::Honest, 5)).collect();
        let workers: Vec<&Device> = devices[..12].iter().collect();

        let mut server = CentralServer::new(init.clone());
        cfl_round(&mut server, &workers, &task, &p, &BTreeSet::new(), false, 1).unwrap();

        // Decentralized round in which every validator approves every worker.
        let registry = devices.iter().map(|d| (d.device_id, d.keypair.public())).collect();
        let txs: Vec<_> = workers
            .iter()
            .map(|d| worker_step(d, &init, &p.hyper, &task, 1, p.sigma, 1).unwrap())
            .collect();
        let mut vtxs: Vec<ValidatorTransaction> = Vec::new();
        for v in &devices[12..17] {
            let proxy = crate::protocol::ProxyModel { params: init.clone(), metric: 0.0 };
            // A negative ratio threshold approves every update.
            let (t, _) = crate::protocol::validator_step(v, &proxy, &txs, &task, -1.0, &registry, 1, 1).unwrap();
            vtxs.extend(t);
        }
        let mut chain = Chain::new("llr", Digest(init.digest()));
        let mut stakes = StakeLedger::default();
        let block = miner_step(&devices[17], 1, chain.head().hash, Digest(init.digest()), &vtxs, &registry, 1);
        assert!(block.updates.iter().all(|u| u.votes.negative == 0));
        let (dfl_global, _) = finalize_round(&[block], &txs, &init, &mut chain, &mut stakes, &registry, true).unwrap();
        assert_eq!(dfl_global, server.global);
    }

    #[test]
    fn server_faulted_every_round_keeps_the_initial_model() {
        let (shards, data) = shards();
        let task = Task::new(&ModelSpec::llr_default(), data.coord_bounds()).unwrap();
        let mut p = params(ModelKind::Llr);
        p.faults = FaultSchedule {
            count: 21,
            phase: FaultPhase::Training,
        };
        let init = task.init_params(&mut rng::stream(1, "init", &[]));
        let mut s = CflState::new(task, shards, &BTreeSet::new(), p, 3, init.clone()).unwrap();
        let outs = s.run_training(3).unwrap();
        assert!(outs.iter().all(|o| o.server_faulty));
        assert_eq!(*s.global(), init);
        assert_eq!(s.server().status, ServerStatus::Faulted);
    }

    #[test]
    fn faults_draw_from_clients_and_server() {
        let (shards, data) = shards();
        let task = Task::new(&ModelSpec::llr_default(), data.coord_bounds()).unwrap();
        let mut p = params(ModelKind::Llr);
        p.hyper.local_epochs = 1;
        p.faults = FaultSchedule {
            count: 3,
            phase: FaultPhase::Both,
        };
        let init = task.init_params(&mut rng::stream(1, "init", &[]));
        let mut s = CflState::new(task, shards, &BTreeSet::new(), p, 11, init).unwrap();
        assert_eq!(s.server_id(), 20);
        let outs = s.run_training(12).unwrap();
        for o in &outs {
            assert_eq!(o.faulty_clients.len() + usize::from(o.server_faulty), 3);
        }
        assert!(outs.iter().any(|o| o.server_faulty));
    }

    #[test]
    fn faulty_inference_stays_in_range() {
        let (_, data) = shards();
        let labels = data.label_set();
        let mut r = rng::stream(4, "inf", &[]);
        let llr = Task::new(&ModelSpec::llr_default(), data.coord_bounds()).unwrap();
        let g = llr.init_params(&mut r);
        let x = &data.samples()[0].rss;
        let b = data.coord_bounds();
        assert_eq!(infer_cfl(&llr, &g, x, false, &labels, &mut r).unwrap(), llr.predict(&g, x).unwrap());
        for _ in 0..200 {
            match infer_cfl(&llr, &g, x, true, &labels, &mut r).unwrap() {
                Prediction::Llr { latitude, longitude } => {
                    assert!((b.lat_min..=b.lat_max).contains(&latitude));
                    assert!((b.lon_min..=b.lon_max).contains(&longitude));
                }
                other => panic!("{other:?}"),
            }
        }
        let bfc = Task::new(&ModelSpec::bfc_default(), data.coord_bounds()).unwrap();
        let g = bfc.init_params(&mut r);
        let mut seen = BTreeSet::new();
        for _ in 0..600 {
            if let Prediction::Bfc { building, floor } = infer_cfl(&bfc, &g, x, true, &labels, &mut r).unwrap() {
                assert!(labels.contains(&(building, floor)));
                seen.insert((building, floor));
            }
        }
        assert_eq!(seen.len(), labels.len());
    }
}
