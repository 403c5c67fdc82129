//! The decentralized round state machine: role assignment, worker training,
//! validator voting, miner tallying, highest-stake block selection and
//! vote-filtered aggregation, plus malicious and faulty device behavior.

mod infer;
mod round;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClientShard;
use crate::ledger::{self, KeyPair, LedgerError};
use crate::model::{ModelError, ModelKind};
use crate::rng::{self, SimRng};

pub use infer::{infer_dfl, random_raw_output};
pub use round::{
    finalize_round, miner_step, validate_update, validator_step, worker_step, DflState, ProxyModel,
    RoundOutcome, UpdateOutcome, ValidatorTransaction, WorkerTransaction,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("role counts {counts} do not add up to {participants} participants")]
    RoleCountMismatch { counts: RoleCounts, participants: usize },
    #[error("no miners assigned")]
    NoMiners,
    #[error("no candidate blocks")]
    NoCandidates,
    #[error("{0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "DFL", alias = "dfl")]
    Dfl,
    #[serde(rename = "CFL", alias = "cfl")]
    Cfl,
}

impl System {
    pub fn as_str(self) -> &'static str {
        match self {
            System::Dfl => "DFL",
            System::Cfl => "CFL",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Honest,
    Malicious,
}

/// A participant with its key, data shard and fixed behavior.
#[derive(Clone, Debug)]
pub struct Device {
    pub device_id: u32,
    pub keypair: KeyPair,
    pub shard: ClientShard,
    pub behavior: Behavior,
    seed: u64,
}

impl Device {
    pub fn new(shard: ClientShard, behavior: Behavior, seed: u64) -> Self {
        let device_id = shard.client_id;
        Device {
            device_id,
            keypair: ledger::keygen(device_id, seed),
            shard,
            behavior,
            seed,
        }
    }

    pub fn is_malicious(&self) -> bool {
        self.behavior == Behavior::Malicious
    }

    /// This device's stream for `purpose` in `round`. The centralized baseline
    /// uses the same streams, so equal seeds give equal local updates.
    pub fn rng(&self, purpose: &str, round: u64) -> SimRng {
        rng::stream(self.seed, purpose, &[u64::from(self.device_id), round])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleCounts {
    pub workers: usize,
    pub validators: usize,
    pub miners: usize,
}

impl Default for RoleCounts {
    fn default() -> Self {
        RoleCounts {
            workers: 12,
            validators: 5,
            miners: 3,
        }
    }
}

impl RoleCounts {
    pub fn total(&self) -> usize {
        self.workers + self.validators + self.miners
    }
}

impl fmt::Display for RoleCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.workers, self.validators, self.miners)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RoleAssignment {
    pub round_index: u64,
    pub workers: BTreeSet<u32>,
    pub validators: BTreeSet<u32>,
    pub miners: BTreeSet<u32>,
}

/// Uniform random partition of `participants` into the requested role sizes.
pub fn assign_roles<R: Rng>(
    round_index: u64,
    participants: &[u32],
    counts: RoleCounts,
    rng: &mut R,
) -> Result<RoleAssignment> {
    if counts.total() != participants.len() {
        return Err(ProtocolError::RoleCountMismatch {
            counts,
            participants: participants.len(),
        });
    }
    let mut order = participants.to_vec();
    order.sort_unstable();
    order.shuffle(rng);
    let (w, rest) = order.split_at(counts.workers);
    let (v, m) = rest.split_at(counts.validators);
    Ok(RoleAssignment {
        round_index,
        workers: w.iter().copied().collect(),
        validators: v.iter().copied().collect(),
        miners: m.iter().copied().collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultPhase {
    Training,
    Inference,
    #[default]
    Both,
}

/// A fixed number of faulty devices per round, drawn uniformly afresh each round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSchedule {
    pub count: usize,
    pub phase: FaultPhase,
}

impl FaultSchedule {
    pub fn affects_training(&self) -> bool {
        self.count > 0 && self.phase != FaultPhase::Inference
    }

    pub fn affects_inference(&self) -> bool {
        self.count > 0 && self.phase != FaultPhase::Training
    }

    /// The faulty subset of `population` for a training round.
    pub fn training_faults(&self, seed: u64, round: u64, population: &[u32]) -> BTreeSet<u32> {
        if !self.affects_training() {
            return BTreeSet::new();
        }
        draw_faulty(self.count, population, &mut rng::stream(seed, "faults", &[round]))
    }
}

/// `count` distinct members of `population`, uniformly.
pub fn draw_faulty<R: Rng>(count: usize, population: &[u32], rng: &mut R) -> BTreeSet<u32> {
    assert!(count <= population.len(), "more faulty devices than devices");
    population.choose_multiple(rng, count).copied().collect()
}

/// Outcome of one vote rule application.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValidationVerdict {
    pub worker_id: u32,
    pub metric: f64,
    pub threshold: f64,
    pub vote: i8,
}

/// The validator vote rule. BFC: the proxy's accuracy may exceed the
/// worker's by at most `threshold`. LLR: the proxy's error divided by the
/// worker's error must reach `threshold`; a perfect worker counts as an
/// infinite ratio.
pub fn vote_rule(kind: ModelKind, worker_id: u32, proxy_metric: f64, worker_metric: f64, threshold: f64) -> ValidationVerdict {
    let (metric, positive) = match kind {
        ModelKind::Bfc => {
            let d = proxy_metric - worker_metric;
            (d, d <= threshold)
        }
        ModelKind::Llr => {
            let r = if worker_metric == 0.0 {
                f64::INFINITY
            } else {
                proxy_metric / worker_metric
            };
            (r, r >= threshold)
        }
    };
    ValidationVerdict {
        worker_id,
        metric,
        threshold,
        vote: if positive { 1 } else { -1 },
    }
}

/// Protocol settings shared by every round.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolParams {
    pub role_counts: RoleCounts,
    pub hyper: crate::model::Hyperparams,
    /// T_BFC or T_LLR, whichever matches the task kind.
    pub threshold: f64,
    pub unit_reward: u64,
    /// Standard deviation of the noise malicious workers add.
    pub sigma: f64,
    pub faults: FaultSchedule,
    /// Weight updates by local sample count (`true`) or equally.
    pub weighted_fedavg: bool,
}

impl ProtocolParams {
    pub fn defaults_for(kind: ModelKind) -> Self {
        ProtocolParams {
            role_counts: RoleCounts::default(),
            hyper: crate::model::Hyperparams::default_for(kind),
            threshold: match kind {
                ModelKind::Bfc => 0.1,
                ModelKind::Llr => 0.9,
            },
            unit_reward: 1,
            sigma: 0.5,
            faults: FaultSchedule::default(),
            weighted_fedavg: true,
        }
    }
}

/// Structured per-round event, written one JSON object per line by the harness.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ProtocolEvent {
    RolesAssigned {
        system: System,
        round: u64,
        workers: Vec<u32>,
        validators: Vec<u32>,
        miners: Vec<u32>,
        faulty: Vec<u32>,
    },
    WorkerSubmitted {
        system: System,
        round: u64,
        worker_id: u32,
        malicious: bool,
        faulty: bool,
        claimed_reward: u64,
    },
    Verdict {
        system: System,
        round: u64,
        validator_id: u32,
        worker_id: u32,
        metric: f64,
        threshold: f64,
        vote: i8,
    },
    BlockSelected {
        system: System,
        round: u64,
        miner_id: u32,
        block_hash: ledger::Digest,
        approved: Vec<u32>,
        rejected: Vec<u32>,
        reward_total: u64,
    },
    RoundAborted {
        system: System,
        round: u64,
        reason: String,
    },
    CflRound {
        system: System,
        round: u64,
        server_faulty: bool,
        faulty_clients: Vec<u32>,
        malicious_clients: Vec<u32>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_partition_with_requested_sizes() {
        let ids: Vec<u32> = (0..20).collect();
        let a = assign_roles(1, &ids, RoleCounts::default(), &mut rng::stream(1, "r", &[])).unwrap();
        assert_eq!((a.workers.len(), a.validators.len(), a.miners.len()), (12, 5, 3));
        let all: BTreeSet<u32> = a.workers.iter().chain(&a.validators).chain(&a.miners).copied().collect();
        assert_eq!(all.len(), 20);
        let b = assign_roles(1, &ids, RoleCounts::default(), &mut rng::stream(1, "r", &[])).unwrap();
        assert_eq!(a, b);

        let degenerate = RoleCounts {
            workers: 20,
            validators: 0,
            miners: 0,
        };
        let d = assign_roles(1, &ids, degenerate, &mut rng::stream(1, "r", &[])).unwrap();
        assert_eq!(d.workers.len(), 20);
        assert!(matches!(
            assign_roles(1, &ids[..19], RoleCounts::default(), &mut rng::stream(1, "r", &[])),
            Err(ProtocolError::RoleCountMismatch { .. })
        ));
    }

    #[test]
    fn roles_vary_across_rounds() {
        let ids: Vec<u32> = (0..20).collect();
        let miners: BTreeSet<Vec<u32>> = (0..10)
            .map(|r| {
                let a = assign_roles(r, &ids, RoleCounts::default(), &mut rng::stream(1, "r", &[r])).unwrap();
                a.miners.into_iter().collect()
            })
            .collect();
        assert!(miners.len() > 5);
    }

    #[test]
    fn vote_rule_examples() {
        let v = |kind, p, w, t| vote_rule(kind, 0, p, w, t).vote;
        assert_eq!(v(ModelKind::Bfc, 0.95, 0.93, 0.1), 1);
        assert_eq!(v(ModelKind::Bfc, 0.95, 0.60, 0.1), -1);
        assert_eq!(v(ModelKind::Llr, 6.0, 5.0, 0.9), 1);
        assert_eq!(v(ModelKind::Llr, 6.0, 60.0, 0.9), -1);
        assert_eq!(v(ModelKind::Llr, 6.0, 0.0, 0.9), 1);
        assert!((vote_rule(ModelKind::Bfc, 0, 0.95, 0.60, 0.1).metric - 0.35).abs() < 1e-12);
        assert!((vote_rule(ModelKind::Llr, 0, 6.0, 5.0, 0.9).metric - 1.2).abs() < 1e-12);
    }

    #[test]
    fn faults_are_drawn_per_round() {
        let ids: Vec<u32> = (0..21).collect();
        let s = FaultSchedule {
            count: 3,
            phase: FaultPhase::Both,
        };
        let a = s.training_faults(4, 1, &ids);
        assert_eq!(a.len(), 3);
        assert_eq!(a, s.training_faults(4, 1, &ids));
        assert!((2..8).any(|r| s.training_faults(4, r, &ids) != a));
        let inference_only = FaultSchedule {
            phase: FaultPhase::Inference,
            ..s
        };
        assert!(inference_only.training_faults(4, 1, &ids).is_empty());
    }
}
