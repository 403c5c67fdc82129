use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use super::{
    assign_roles, vote_rule, Behavior, Device, ProtocolError, ProtocolEvent, ProtocolParams, Result, RoleAssignment,
    System, ValidationVerdict,
};
use crate::dataset::{ClientShard, Dataset};
use crate::ledger::{
    self, Block, Chain, Digest, KeyRegistry, LedgerError, RewardRecord, Role, Signature, StakeLedger, UpdateRecord,
    VoteTally,
};
use crate::model::{
    evaluate_bfc, evaluate_llr, fedavg, inject_gaussian_noise, train_local, uniform_in_init_range, Hyperparams,
    ModelKind, ParamVector, Task,
};
use crate::rng;

/// A worker's signed local update `(L^w, r^w)`.
#[derive(Clone, Debug)]
pub struct WorkerTransaction {
    pub round_index: u64,
    pub worker_id: u32,
    pub update: ParamVector,
    /// Digest of `update`; the signature covers this digest.
    pub update_digest: Digest,
    pub sample_count: u64,
    pub claimed_reward: u64,
    pub signature: Signature,
}

impl WorkerTransaction {
    fn message(&self) -> Vec<u8> {
        let mut m = b"dfloc-worker-tx".to_vec();
        m.extend(self.round_index.to_le_bytes());
        m.extend(self.worker_id.to_le_bytes());
        m.extend(self.update_digest.0);
        m.extend(self.sample_count.to_le_bytes());
        m.extend(self.claimed_reward.to_le_bytes());
        m
    }

    /// Transaction id: digest of the signed message and its signature.
    pub fn id(&self) -> Digest {
        let mut m = self.message();
        m.extend(self.signature.0);
        Digest::of(&m)
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        registry
            .get(&self.worker_id)
            .is_some_and(|k| ledger::verify(k, &self.message(), &self.signature))
    }

    /// Whether `update` still matches the signed digest.
    pub fn payload_intact(&self) -> bool {
        Digest(self.update.digest()) == self.update_digest
    }
}

/// A validator's signed vote on one worker transaction.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatorTransaction {
    pub round_index: u64,
    pub validator_id: u32,
    pub worker_id: u32,
    pub worker_tx: Digest,
    pub update_digest: Digest,
    pub sample_count: u64,
    pub claimed_reward: u64,
    pub vote: i8,
    pub validator_reward: u64,
    pub signature: Signature,
}

impl ValidatorTransaction {
    fn message(&self) -> Vec<u8> {
        let mut m = b"dfloc-validator-tx".to_vec();
        m.extend(self.round_index.to_le_bytes());
        m.extend(self.validator_id.to_le_bytes());
        m.extend(self.worker_id.to_le_bytes());
        m.extend(self.worker_tx.0);
        m.extend(self.update_digest.0);
        m.extend(self.sample_count.to_le_bytes());
        m.extend(self.claimed_reward.to_le_bytes());
        m.extend(self.vote.to_le_bytes());
        m.extend(self.validator_reward.to_le_bytes());
        m
    }

    pub fn verify(&self, registry: &KeyRegistry) -> bool {
        registry
            .get(&self.validator_id)
            .is_some_and(|k| ledger::verify(k, &self.message(), &self.signature))
    }

    fn signed(mut self, device: &Device) -> Self {
        self.signature = ledger::sign(&device.keypair, &self.message());
        self
    }
}

fn sign_worker_tx(device: &Device, round: u64, update: ParamVector, claimed_reward: u64) -> WorkerTransaction {
    let mut tx = WorkerTransaction {
        round_index: round,
        worker_id: device.device_id,
        update_digest: Digest(update.digest()),
        update,
        sample_count: device.shard.train.len() as u64,
        claimed_reward,
        signature: Signature::ZERO,
    };
    tx.signature = ledger::sign(&device.keypair, &tx.message());
    tx
}

/// Local training from the global model. Malicious devices add Gaussian noise
/// to the trained parameters before signing.
pub fn worker_step(
    device: &Device,
    global: &ParamVector,
    hyper: &Hyperparams,
    task: &Task,
    round: u64,
    sigma: f64,
    unit_reward: u64,
) -> Result<WorkerTransaction> {
    let mut update = train_local(global, &device.shard.train, hyper, task, &mut device.rng("train", round))?;
    if device.is_malicious() {
        update = inject_gaussian_noise(&update, sigma, &mut device.rng("noise", round));
    }
    let reward = hyper.local_epochs as u64 * device.shard.train.len() as u64 * unit_reward;
    Ok(sign_worker_tx(device, round, update, reward))
}

/// What a faulty worker emits: random parameters under a signature that does
/// not verify.
fn faulty_worker_tx(device: &Device, task: &Task, hyper: &Hyperparams, round: u64, unit_reward: u64) -> WorkerTransaction {
    let update = uniform_in_init_range(task.network(), task.fingerprint(), &mut device.rng("fault", round));
    let reward = hyper.local_epochs as u64 * device.shard.train.len() as u64 * unit_reward;
    let mut tx = sign_worker_tx(device, round, update, reward);
    tx.signature = tx.signature.corrupted();
    tx
}

/// Task metric on a test set: accuracy for BFC, mean error in meters for LLR.
pub(crate) fn task_metric(params: &ParamVector, test: &Dataset, task: &Task) -> Result<f64> {
    Ok(match task.kind() {
        ModelKind::Bfc => evaluate_bfc(params, test, task)?,
        ModelKind::Llr => evaluate_llr(params, test, task)?,
    })
}

/// A validator's one-epoch proxy `L^v(1)` and its metric on the validator's
/// own test set; computed once per round.
#[derive(Clone, Debug)]
pub struct ProxyModel {
    pub params: ParamVector,
    pub metric: f64,
}

impl ProxyModel {
    pub fn train(device: &Device, global: &ParamVector, hyper: &Hyperparams, task: &Task, round: u64) -> Result<Self> {
        let params = train_local(
            global,
            &device.shard.train,
            &hyper.with_epochs(1),
            task,
            &mut device.rng("proxy", round),
        )?;
        let metric = task_metric(&params, &device.shard.test, task)?;
        Ok(ProxyModel { params, metric })
    }
}

/// Vote on one worker transaction. Transactions whose signature does not
/// verify are discarded (`None`).
pub fn validate_update(
    validator: &Device,
    proxy: &ProxyModel,
    tx: &WorkerTransaction,
    task: &Task,
    threshold: f64,
    registry: &KeyRegistry,
) -> Result<Option<ValidationVerdict>> {
    if !tx.verify(registry) {
        return Ok(None);
    }
    let worker_metric = task_metric(&tx.update, &validator.shard.test, task)?;
    Ok(Some(vote_rule(task.kind(), tx.worker_id, proxy.metric, worker_metric, threshold)))
}

/// Examine the worker transactions in order and emit one signed validator
/// transaction per signature-valid one, each earning `|D_tr^v| × r`.
#[allow(clippy::too_many_arguments)]
pub fn validator_step(
    device: &Device,
    proxy: &ProxyModel,
    worker_txs: &[WorkerTransaction],
    task: &Task,
    threshold: f64,
    registry: &KeyRegistry,
    unit_reward: u64,
    round: u64,
) -> Result<(Vec<ValidatorTransaction>, Vec<ValidationVerdict>)> {
    let reward = device.shard.train.len() as u64 * unit_reward;
    let mut txs = Vec::new();
    let mut verdicts = Vec::new();
    for wtx in worker_txs {
        let Some(verdict) = validate_update(device, proxy, wtx, task, threshold, registry)? else {
            continue;
        };
        txs.push(validator_tx(device, round, wtx, verdict.vote, reward));
        verdicts.push(verdict);
    }
    Ok((txs, verdicts))
}

fn validator_tx(device: &Device, round: u64, wtx: &WorkerTransaction, vote: i8, reward: u64) -> ValidatorTransaction {
    ValidatorTransaction {
        round_index: round,
        validator_id: device.device_id,
        worker_id: wtx.worker_id,
        worker_tx: wtx.id(),
        update_digest: wtx.update_digest,
        sample_count: wtx.sample_count,
        claimed_reward: wtx.claimed_reward,
        vote,
        validator_reward: reward,
        signature: Signature::ZERO,
    }
    .signed(device)
}

/// Tally the signature-valid validator transactions per worker, compute the
/// reward records and mine a candidate block.
///
/// Worker rewards are zeroed for updates with more negative than positive
/// votes. The miner earns one unit per validator transaction it consumed,
/// which is `|W| × |V| × r` when every transaction is valid.
pub fn miner_step(
    miner: &Device,
    round: u64,
    prev_hash: Digest,
    base_model: Digest,
    validator_txs: &[ValidatorTransaction],
    registry: &KeyRegistry,
    unit_reward: u64,
) -> Block {
    let mut tallies: BTreeMap<(u32, Digest), (UpdateRecord, u64)> = BTreeMap::new();
    let mut validator_totals: BTreeMap<u32, u64> = BTreeMap::new();
    let mut consumed = 0u64;
    for vtx in validator_txs {
        if vtx.round_index != round || !vtx.verify(registry) {
            continue;
        }
        consumed += 1;
        let (rec, _) = tallies.entry((vtx.worker_id, vtx.update_digest)).or_insert_with(|| {
            (
                UpdateRecord {
                    worker_id: vtx.worker_id,
                    sample_count: vtx.sample_count,
                    update_digest: vtx.update_digest,
                    votes: VoteTally::default(),
                },
                vtx.claimed_reward,
            )
        });
        if vtx.vote > 0 {
            rec.votes.positive += 1;
        } else {
            rec.votes.negative += 1;
        }
        *validator_totals.entry(vtx.validator_id).or_default() += vtx.validator_reward;
    }

    let mut rewards = Vec::new();
    let mut updates = Vec::new();
    for (rec, claimed) in tallies.into_values() {
        rewards.push(RewardRecord {
            device_id: rec.worker_id,
            role: Role::Worker,
            amount: if rec.votes.approves() { claimed } else { 0 },
        });
        updates.push(rec);
    }
    rewards.extend(validator_totals.into_iter().map(|(id, amount)| RewardRecord {
        device_id: id,
        role: Role::Validator,
        amount,
    }));
    rewards.push(RewardRecord {
        device_id: miner.device_id,
        role: Role::Miner,
        amount: consumed * unit_reward,
    });
    ledger::mine_candidate(round, prev_hash, base_model, updates, rewards, &miner.keypair)
}

/// Select the legitimate block among the valid candidates, average exactly
/// its approved updates, and append it. With no approved update the previous
/// global model is kept.
pub fn finalize_round(
    candidates: &[Block],
    worker_txs: &[WorkerTransaction],
    previous_global: &ParamVector,
    chain: &mut Chain,
    stakes: &mut StakeLedger,
    registry: &KeyRegistry,
    weighted: bool,
) -> Result<(ParamVector, Block)> {
    let head = chain.head().hash;
    let valid: Vec<Block> = candidates
        .iter()
        .filter(|b| b.prev_hash == head && b.verify(registry).is_ok())
        .cloned()
        .collect();
    let block = match ledger::select_legitimate(&valid, stakes) {
        Ok(b) => b.clone(),
        Err(LedgerError::NoCandidates) => return Err(ProtocolError::NoCandidates),
        Err(e) => return Err(e.into()),
    };

    let mut inputs = Vec::new();
    for rec in block.updates.iter().filter(|r| r.votes.approves()) {
        let tx = worker_txs
            .iter()
            .find(|t| t.worker_id == rec.worker_id && t.update_digest == rec.update_digest)
            .ok_or_else(|| ProtocolError::InvalidSetup(format!("block references unknown update of worker {}", rec.worker_id)))?;
        let weight = if weighted { rec.sample_count as f64 } else { 1.0 };
        inputs.push((&tx.update, weight));
    }
    let new_global = if inputs.is_empty() {
        previous_global.clone()
    } else {
        fedavg(&inputs)?
    };
    chain.append_block(block.clone(), stakes, registry)?;
    Ok((new_global, block))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateOutcome {
    pub worker_id: u32,
    pub malicious: bool,
    pub votes: VoteTally,
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundOutcome {
    pub round: u64,
    pub roles: RoleAssignment,
    pub faulty: BTreeSet<u32>,
    /// Reason the round produced no block, if it did not.
    pub aborted: Option<String>,
    pub miner_id: Option<u32>,
    pub updates: Vec<UpdateOutcome>,
}

/// Full state of a decentralized training run.
#[derive(Clone, Debug)]
pub struct DflState {
    task: Task,
    devices: Vec<Device>,
    registry: KeyRegistry,
    chain: Chain,
    stakes: StakeLedger,
    global: ParamVector,
    params: ProtocolParams,
    seed: u64,
    rounds_done: u64,
    events: Vec<ProtocolEvent>,
}

impl DflState {
    /// One device per shard; devices listed in `malicious` add noise whenever
    /// they work. The chain is labeled with the task kind.
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
        let ids: BTreeSet<u32> = shards.iter().map(|s| s.client_id).collect();
        if ids.len() != shards.len() {
            return Err(ProtocolError::InvalidSetup("device ids must be unique".into()));
        }
        if let Some(m) = malicious.iter().find(|m| !ids.contains(m)) {
            return Err(ProtocolError::InvalidSetup(format!("malicious device {m} does not exist")));
        }
        if params.faults.count > shards.len() {
            return Err(ProtocolError::InvalidSetup(format!(
                "{} faulty devices requested but only {} exist",
                params.faults.count,
                shards.len()
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
        let registry = devices.iter().map(|d| (d.device_id, d.keypair.public())).collect();
        let chain = Chain::new(task.kind().as_str(), Digest(initial_global.digest()));
        Ok(DflState {
            task,
            devices,
            registry,
            chain,
            stakes: StakeLedger::default(),
            global: initial_global,
            params,
            seed,
            rounds_done: 0,
            events: Vec::new(),
        })
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn stakes(&self) -> &StakeLedger {
        &self.stakes
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn rounds_done(&self) -> u64 {
        self.rounds_done
    }

    pub fn events(&self) -> &[ProtocolEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<ProtocolEvent> {
        std::mem::take(&mut self.events)
    }

    fn device(&self, id: u32) -> &Device {
        self.devices.iter().find(|d| d.device_id == id).expect("known device id")
    }

    /// Run the next round. Rounds whose miners are all faulty are aborted and
    /// leave the global model and chain unchanged.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let round = self.rounds_done + 1;
        let ids: Vec<u32> = self.devices.iter().map(|d| d.device_id).collect();
        let faulty = self.params.faults.training_faults(self.seed, round, &ids);
        let roles = assign_roles(round, &ids, self.params.role_counts, &mut rng::stream(self.seed, "roles", &[round]))?;
        if roles.miners.is_empty() {
            return Err(ProtocolError::NoMiners);
        }
        self.events.push(ProtocolEvent::RolesAssigned {
            system: System::Dfl,
            round,
            workers: roles.workers.iter().copied().collect(),
            validators: roles.validators.iter().copied().collect(),
            miners: roles.miners.iter().copied().collect(),
            faulty: faulty.iter().copied().collect(),
        });
        let p = self.params.clone();

        let mut worker_txs = Vec::with_capacity(roles.workers.len());
        for &w in &roles.workers {
            let d = self.device(w);
            let tx = if faulty.contains(&w) {
                faulty_worker_tx(d, &self.task, &p.hyper, round, p.unit_reward)
            } else {
                worker_step(d, &self.global, &p.hyper, &self.task, round, p.sigma, p.unit_reward)?
            };
            self.events.push(ProtocolEvent::WorkerSubmitted {
                system: System::Dfl,
                round,
                worker_id: w,
                malicious: d.is_malicious(),
                faulty: faulty.contains(&w),
                claimed_reward: tx.claimed_reward,
            });
            worker_txs.push(tx);
        }

        let mut validator_txs = Vec::new();
        for &v in &roles.validators {
            let d = self.device(v);
            if faulty.contains(&v) {
                let mut r = d.rng("fault", round);
                let reward = d.shard.train.len() as u64 * p.unit_reward;
                for wtx in &worker_txs {
                    let vote = if r.gen_bool(0.5) { 1 } else { -1 };
                    let mut vtx = validator_tx(d, round, wtx, vote, reward);
                    vtx.signature = vtx.signature.corrupted();
                    validator_txs.push(vtx);
                }
                continue;
            }
            let proxy = ProxyModel::train(d, &self.global, &p.hyper, &self.task, round)?;
            let (txs, verdicts) =
                validator_step(d, &proxy, &worker_txs, &self.task, p.threshold, &self.registry, p.unit_reward, round)?;
            for verdict in verdicts {
                self.events.push(ProtocolEvent::Verdict {
                    system: System::Dfl,
                    round,
                    validator_id: v,
                    worker_id: verdict.worker_id,
                    metric: verdict.metric,
                    threshold: verdict.threshold,
                    vote: verdict.vote,
                });
            }
            validator_txs.extend(txs);
        }

        let prev_hash = self.chain.head().hash;
        let base = Digest(self.global.digest());
        let candidates: Vec<Block> = roles
            .miners
            .iter()
            .map(|&m| {
                let mut b = miner_step(self.device(m), round, prev_hash, base, &validator_txs, &self.registry, p.unit_reward);
                if faulty.contains(&m) {
                    b.signature = b.signature.corrupted();
                }
                b
            })
            .collect();

        self.rounds_done = round;
        let finalized = finalize_round(
            &candidates,
            &worker_txs,
            &self.global,
            &mut self.chain,
            &mut self.stakes,
            &self.registry,
            p.weighted_fedavg,
        );
        let (new_global, block) = match finalized {
            Ok(x) => x,
            Err(ProtocolError::NoCandidates) => {
                let reason = "no valid candidate block (all miners faulty)".to_string();
                log::debug!("round {round} aborted: {reason}");
                self.events.push(ProtocolEvent::RoundAborted {
                    system: System::Dfl,
                    round,
                    reason: reason.clone(),
                });
                return Ok(RoundOutcome {
                    round,
                    roles,
                    faulty,
                    aborted: Some(reason),
                    miner_id: None,
                    updates: Vec::new(),
                });
            }
            Err(e) => return Err(e),
        };
        self.global = new_global;

        let updates: Vec<UpdateOutcome> = block
            .updates
            .iter()
            .map(|u| UpdateOutcome {
                worker_id: u.worker_id,
                malicious: self.device(u.worker_id).is_malicious(),
                votes: u.votes,
                included: u.votes.approves(),
            })
            .collect();
        self.events.push(ProtocolEvent::BlockSelected {
            system: System::Dfl,
            round,
            miner_id: block.miner_id,
            block_hash: block.hash,
            approved: updates.iter().filter(|u| u.included).map(|u| u.worker_id).collect(),
            rejected: updates.iter().filter(|u| !u.included).map(|u| u.worker_id).collect(),
            reward_total: block.reward_total(),
        });
        Ok(RoundOutcome {
            round,
            roles,
            faulty,
            aborted: None,
            miner_id: Some(block.miner_id),
            updates,
        })
    }

    /// Run `rounds` further rounds.
    pub fn run_training(&mut self, rounds: u64) -> Result<Vec<RoundOutcome>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, partition_clients, SyntheticConfig};
    use crate::model::ModelSpec;
    use crate::protocol::{FaultPhase, FaultSchedule, RoleCounts};

    fn setup(kind: ModelKind, malicious: &[u32], faults: usize, seed: u64) -> DflState {
        let data = generate_synthetic(&SyntheticConfig {
            num_samples: 600,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let shards = partition_clients(&data, 20, 0.2, 3).unwrap();
        let task = Task::new(&ModelSpec::default_for(kind), data.coord_bounds()).unwrap();
        let mut params = ProtocolParams::defaults_for(kind);
        params.hyper.local_epochs = 2;
        params.hyper.batch_size = 12;
        params.faults = FaultSchedule {
            count: faults,
            phase: FaultPhase::Both,
        };
        let init = task.init_params(&mut rng::stream(seed, "init", &[]));
        DflState::new(task, shards, &malicious.iter().copied().collect(), params, seed, init).unwrap()
    }

    #[test]
    fn worker_reward_and_signature() {
        let s = setup(ModelKind::Llr, &[], 0, 1);
        let d = &s.devices()[0];
        let tx = worker_step(d, s.global(), &s.params.hyper, s.task(), 1, 1.0, 1).unwrap();
        assert_eq!(tx.claimed_reward, 2 * d.shard.train.len() as u64);
        assert!(tx.verify(s.registry()));
        assert!(tx.payload_intact());
        let mut bad = tx.clone();
        bad.claimed_reward += 1;
        assert!(!bad.verify(s.registry()));
    }

    #[test]
    fn malicious_worker_with_zero_sigma_matches_honest() {
        let s = setup(ModelKind::Llr, &[0], 0, 1);
        let mal = &s.devices()[0];
        let honest = Device::new(mal.shard.clone(), Behavior::Honest, s.seed);
        let a = worker_step(mal, s.global(), &s.params.hyper, s.task(), 1, 0.0, 1).unwrap();
        let b = worker_step(&honest, s.global(), &s.params.hyper, s.task(), 1, 0.0, 1).unwrap();
        assert_eq!(a.update, b.update);
        assert_eq!(a.signature, b.signature);
        let c = worker_step(mal, s.global(), &s.params.hyper, s.task(), 1, 0.5, 1).unwrap();
        assert_ne!(c.update, b.update);
    }

    #[test]
    fn validators_discard_invalid_signatures_and_earn_per_transaction() {
        let s = setup(ModelKind::Bfc, &[], 0, 2);
        let (task, hyper) = (s.task(), &s.params.hyper);
        let mut txs: Vec<WorkerTransaction> = s.devices()[..4]
            .iter()
            .map(|d| worker_step(d, s.global(), hyper, task, 1, 1.0, 1).unwrap())
            .collect();
        txs[2].signature = txs[2].signature.corrupted();
        let v = &s.devices()[10];
        let proxy = ProxyModel::train(v, s.global(), hyper, task, 1).unwrap();
        let (vtxs, verdicts) = validator_step(v, &proxy, &txs, task, 0.1, s.registry(), 1, 1).unwrap();
        assert_eq!(vtxs.len(), 3);
        assert!(verdicts.iter().all(|x| x.worker_id != txs[2].worker_id));
        assert!(vtxs.iter().all(|t| t.validator_reward == v.shard.train.len() as u64 && t.verify(s.registry())));
        let (none, _) = validator_step(v, &proxy, &[], task, 0.1, s.registry(), 1, 1).unwrap();
        assert!(none.is_empty());
    }

    fn fake_vtx(s: &DflState, validator: u32, worker: u32, vote: i8) -> ValidatorTransaction {
        let d = s.device(validator);
        ValidatorTransaction {
            round_index: 1,
            validator_id: validator,
            worker_id: worker,
            worker_tx: Digest::of(&worker.to_le_bytes()),
            update_digest: Digest::of(&[worker as u8, 1]),
            sample_count: 24,
            claimed_reward: 240,
            vote,
            validator_reward: 24,
            signature: Signature::ZERO,
        }
        .signed(d)
    }

    #[test]
    fn miner_tallies_votes_and_rewards() {
        let s = setup(ModelKind::Bfc, &[], 0, 4);
        let mut vtxs = Vec::new();
        // Worker 1 gets (3, 2), worker 2 gets (2, 3), workers 3..=12 get (5, 0).
        for v in 13..18u32 {
            vtxs.push(fake_vtx(&s, v, 1, if v < 16 { 1 } else { -1 }));
            vtxs.push(fake_vtx(&s, v, 2, if v < 15 { 1 } else { -1 }));
            for w in 3..=12 {
                vtxs.push(fake_vtx(&s, v, w, 1));
            }
        }
        assert_eq!(vtxs.len(), 60);
        let mut forged = fake_vtx(&s, 13, 3, -1);
        forged.signature = forged.signature.corrupted();
        vtxs.push(forged);

        let miner = s.device(18);
        let b = miner_step(miner, 1, s.chain().head().hash, Digest::ZERO, &vtxs, s.registry(), 1);
        let votes: BTreeMap<u32, (u32, u32)> =
            b.updates.iter().map(|u| (u.worker_id, (u.votes.positive, u.votes.negative))).collect();
        assert_eq!(votes[&1], (3, 2));
        assert_eq!(votes[&2], (2, 3));
        assert_eq!(votes[&3], (5, 0));
        let reward = |id, role| b.rewards.iter().find(|r| r.device_id == id && r.role == role).unwrap().amount;
        assert_eq!(reward(1, Role::Worker), 240);
        assert_eq!(reward(2, Role::Worker), 0);
        assert_eq!(reward(13, Role::Validator), 12 * 24);
        assert_eq!(reward(18, Role::Miner), 60);
        assert!(b.verify(s.registry()).is_ok());
    }

    #[test]
    fn rounds_grow_the_chain_and_conserve_stake() {
        let mut s = setup(ModelKind::Bfc, &[], 0, 5);
        let mut prev_total = 0;
        for r in 1..=3u64 {
            let out = s.run_round().unwrap();
            assert!(out.aborted.is_none());
            assert_eq!(s.chain().len() as u64, r + 1);
            let head = s.chain().head();
            assert_eq!(s.stakes().total(), prev_total + head.reward_total());
            prev_total = s.stakes().total();
            // (12, 5, 3) with every transaction valid.
            let miner_reward = head.rewards.iter().find(|x| x.role == Role::Miner).unwrap();
            assert_eq!(miner_reward.amount, 60);
        }
        assert!(s.chain().verify(s.registry()).is_ok());
        assert_eq!(s.chain().replay_stakes(), *s.stakes());
    }

    #[test]
    fn zero_rounds_keep_the_initial_model_and_runs_are_deterministic() {
        let mut a = setup(ModelKind::Llr, &[2, 7], 2, 6);
        let init = a.global().clone();
        a.run_training(0).unwrap();
        assert_eq!(*a.global(), init);
        let mut b = setup(ModelKind::Llr, &[2, 7], 2, 6);
        a.run_training(3).unwrap();
        b.run_training(3).unwrap();
        let hashes = |s: &DflState| s.chain().blocks().iter().map(|b| b.hash).collect::<Vec<_>>();
        assert_eq!(hashes(&a), hashes(&b));
        assert_eq!(a.global(), b.global());
        assert_eq!(a.events(), b.events());
    }

    #[test]
    fn faulty_devices_never_reach_a_tally() {
        let mut s = setup(ModelKind::Llr, &[], 6, 7);
        for _ in 0..4 {
            let out = s.run_round().unwrap();
            if out.aborted.is_some() {
                assert!(out.roles.miners.is_subset(&out.faulty));
                continue;
            }
            let block = s.chain().head();
            assert!(!out.faulty.contains(&block.miner_id));
            for u in &block.updates {
                assert!(!out.faulty.contains(&u.worker_id));
            }
            let live_validators = out.roles.validators.difference(&out.faulty).count() as u32;
            for u in &block.updates {
                assert_eq!(u.votes.positive + u.votes.negative, live_validators);
            }
            for r in &block.rewards {
                assert!(!out.faulty.contains(&r.device_id));
            }
        }
    }

    #[test]
    fn all_miners_faulty_aborts_the_round() {
        let mut s = setup(ModelKind::Llr, &[], 20, 8);
        let before = s.global().clone();
        let out = s.run_round().unwrap();
        assert!(out.aborted.is_some());
        assert_eq!(s.chain().len(), 1);
        assert_eq!(*s.global(), before);
    }

    #[test]
    fn no_miners_is_an_error() {
        let mut s = setup(ModelKind::Llr, &[], 0, 9);
        s.params.role_counts = RoleCounts {
            workers: 20,
            validators: 0,
            miners: 0,
        };
        assert!(matches!(s.run_round(), Err(ProtocolError::NoMiners)));
    }
}
