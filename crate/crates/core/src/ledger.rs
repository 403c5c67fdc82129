//! Blockchain substrate: device keys and signatures, block hashing and
//! linkage, stake accounting, highest-stake block selection, and a plain-text
//! chain dump that can be audited offline.
//!
//! # Chain dump format
//!
//! A dump holds one or more chains. Each chain is a section:
//!
//! ```text
//! dfloc-chain v1 <label>
//! key <device_id> <public key, 64 hex>        one per device that mined a block, ascending
//! block <round>
//! prev <64 hex>                            for genesis: digest of the chain label
//! miner <device_id | genesis>
//! base <64 hex>                               digest of the global model the round started from
//! update <worker_id> <samples> <64 hex> <positive> <negative>    zero or more
//! reward <device_id> <worker|validator|miner> <amount>           zero or more
//! hash <64 hex>
//! sig <128 hex>
//! stake_total <units>                          cumulative stake after this block
//! end
//! ```
//!
//! Hex is lowercase, fields are separated by one space and every line ends
//! with `\n`. [`audit_dump`] accepts a dump only if it is byte-identical to
//! the canonical rendering of what it parses to, so every byte is checked.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::Serialize;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("block {round} does not link to the chain head")]
    LinkMismatch { round: u64 },
    #[error("block {round} hash does not match its contents")]
    HashMismatch { round: u64 },
    #[error("block {round} signature does not verify for miner {miner}")]
    BadSignature { round: u64, miner: u32 },
    #[error("block round {round} already present (head is round {head})")]
    RoundNotMonotone { round: u64, head: u64 },
    #[error("no public key for miner {0}")]
    UnknownMiner(u32),
    #[error("no candidate blocks")]
    NoCandidates,
    #[error("candidate blocks come from different rounds")]
    MixedRounds,
    #[error("malformed chain dump at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("audit failed: {0}")]
    Audit(String),
}

pub type Result<T> = std::result::Result<T, LedgerError>;

/// SHA-256 digest.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; 32]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &hex::encode(self.0)[..12])
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub const ZERO: Signature = Signature([0; 64]);

    /// The same signature with one bit flipped; never verifies.
    pub fn corrupted(mut self) -> Self {
        self.0[0] ^= 0x01;
        self
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", &hex::encode(self.0)[..12])
    }
}

/// A device's Ed25519 signing identity.
#[derive(Clone)]
pub struct KeyPair {
    pub device_id: u32,
    signing: SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("device_id", &self.device_id)
            .field("public", &self.public())
            .finish()
    }
}

impl KeyPair {
    pub fn secret(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }
}

/// Deterministic key pair for `(device_id, seed)`.
pub fn keygen(device_id: u32, seed: u64) -> KeyPair {
    let mut h = Sha256::new();
    h.update(b"dfloc-device-key");
    h.update(seed.to_le_bytes());
    h.update(device_id.to_le_bytes());
    let secret: [u8; 32] = h.finalize().into();
    KeyPair {
        device_id,
        signing: SigningKey::from_bytes(&secret),
    }
}

pub fn sign(kp: &KeyPair, message: &[u8]) -> Signature {
    Signature(kp.signing.sign(message).to_bytes())
}

pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    key.verify(message, &ed25519_dalek::Signature::from_bytes(&sig.0))
        .is_ok()
}

/// Public keys known to every participant.
pub type KeyRegistry = BTreeMap<u32, PublicKey>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Worker,
    Validator,
    Miner,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Worker => "worker",
            Role::Validator => "validator",
            Role::Miner => "miner",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "worker" => Some(Role::Worker),
            "validator" => Some(Role::Validator),
            "miner" => Some(Role::Miner),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VoteTally {
    pub positive: u32,
    pub negative: u32,
}

impl VoteTally {
    /// Aggregation rule: positive votes not fewer than negative votes.
    pub fn approves(&self) -> bool {
        self.positive >= self.negative
    }
}

/// One worker update as recorded in a block. The parameter vector itself
/// travels alongside the block and is referenced here by digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct UpdateRecord {
    pub worker_id: u32,
    pub sample_count: u64,
    pub update_digest: Digest,
    pub votes: VoteTally,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RewardRecord {
    pub device_id: u32,
    pub role: Role,
    pub amount: u64,
}

/// Miner id used by the genesis block.
pub const GENESIS_MINER: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub round: u64,
    pub prev_hash: Digest,
    pub miner_id: u32,
    /// Digest of the global model the round started from (the seed model for genesis).
    pub base_model: Digest,
    pub updates: Vec<UpdateRecord>,
    pub rewards: Vec<RewardRecord>,
    pub hash: Digest,
    pub signature: Signature,
}

impl Block {
    /// The genesis block commits to the chain label through its `prev` field.
    pub fn genesis(label: &str, seed_model: Digest) -> Self {
        let mut b = Block {
            round: 0,
            prev_hash: genesis_anchor(label),
            miner_id: GENESIS_MINER,
            base_model: seed_model,
            updates: Vec::new(),
            rewards: Vec::new(),
            hash: Digest::ZERO,
            signature: Signature::ZERO,
        };
        b.hash = b.content_hash();
        b
    }

    pub fn is_genesis(&self) -> bool {
        self.round == 0 && self.miner_id == GENESIS_MINER
    }

    /// Hash over every field except `hash` and `signature`.
    pub fn content_hash(&self) -> Digest {
        let mut h = Sha256::new();
        h.update(b"dfloc-block-v1");
        h.update(self.round.to_le_bytes());
        h.update(self.prev_hash.0);
        h.update(self.miner_id.to_le_bytes());
        h.update(self.base_model.0);
        h.update((self.updates.len() as u64).to_le_bytes());
        for u in &self.updates {
            h.update(u.worker_id.to_le_bytes());
            h.update(u.sample_count.to_le_bytes());
            h.update(u.update_digest.0);
            h.update(u.votes.positive.to_le_bytes());
            h.update(u.votes.negative.to_le_bytes());
        }
        h.update((self.rewards.len() as u64).to_le_bytes());
        for r in &self.rewards {
            h.update(r.device_id.to_le_bytes());
            h.update([r.role as u8]);
            h.update(r.amount.to_le_bytes());
        }
        Digest(h.finalize().into())
    }

    pub fn reward_total(&self) -> u64 {
        self.rewards.iter().map(|r| r.amount).sum()
    }

    /// Hash integrity plus, for mined blocks, the miner's signature over the hash.
    pub fn verify(&self, registry: &KeyRegistry) -> Result<()> {
        if self.content_hash() != self.hash {
            return Err(LedgerError::HashMismatch { round: self.round });
        }
        if self.is_genesis() {
            return Ok(());
        }
        let key = registry
            .get(&self.miner_id)
            .ok_or(LedgerError::UnknownMiner(self.miner_id))?;
        if !verify(key, &self.hash.0, &self.signature) {
            return Err(LedgerError::BadSignature {
                round: self.round,
                miner: self.miner_id,
            });
        }
        Ok(())
    }
}

/// Hash the block contents and sign the hash with the miner key.
pub fn mine_candidate(
    round: u64,
    prev_hash: Digest,
    base_model: Digest,
    updates: Vec<UpdateRecord>,
    rewards: Vec<RewardRecord>,
    miner: &KeyPair,
) -> Block {
    let mut b = Block {
        round,
        prev_hash,
        miner_id: miner.device_id,
        base_model,
        updates,
        rewards,
        hash: Digest::ZERO,
        signature: Signature::ZERO,
    };
    b.hash = b.content_hash();
    b.signature = sign(miner, &b.hash.0);
    b
}

/// Cumulative stake per device, in reward units.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StakeLedger {
    balances: BTreeMap<u32, u64>,
}

impl StakeLedger {
    pub fn stake(&self, device_id: u32) -> u64 {
        self.balances.get(&device_id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.balances.values().sum()
    }

    pub fn balances(&self) -> &BTreeMap<u32, u64> {
        &self.balances
    }

    pub fn credit(&mut self, block: &Block) {
        for r in &block.rewards {
            *self.balances.entry(r.device_id).or_default() += r.amount;
        }
    }
}

/// The candidate whose miner holds the most stake; ties go to the lowest miner id.
pub fn select_legitimate<'a>(candidates: &'a [Block], stakes: &StakeLedger) -> Result<&'a Block> {
    let first = candidates.first().ok_or(LedgerError::NoCandidates)?;
    if candidates.iter().any(|b| b.round != first.round) {
        return Err(LedgerError::MixedRounds);
    }
    Ok(candidates
        .iter()
        .max_by(|a, b| {
            stakes
                .stake(a.miner_id)
                .cmp(&stakes.stake(b.miner_id))
                .then(b.miner_id.cmp(&a.miner_id))
        })
        .expect("non-empty"))
}

pub fn genesis_anchor(label: &str) -> Digest {
    Digest::of(format!("dfloc-chain:{label}").as_bytes())
}

/// An append-only chain starting at a genesis block.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    label: String,
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new(label: &str, seed_model: Digest) -> Self {
        Chain {
            label: label.to_string(),
            blocks: vec![Block::genesis(label, seed_model)],
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Validate `block` against the head and append it, crediting its rewards.
    /// On error neither the chain nor the stakes change.
    pub fn append_block(&mut self, block: Block, stakes: &mut StakeLedger, registry: &KeyRegistry) -> Result<()> {
        let head = self.head();
        if block.round <= head.round {
            return Err(LedgerError::RoundNotMonotone {
                round: block.round,
                head: head.round,
            });
        }
        if block.prev_hash != head.hash || block.is_genesis() {
            return Err(LedgerError::LinkMismatch { round: block.round });
        }
        block.verify(registry)?;
        stakes.credit(&block);
        self.blocks.push(block);
        Ok(())
    }

    /// Re-check linkage, hashes and signatures of every block.
    pub fn verify(&self, registry: &KeyRegistry) -> Result<()> {
        let genesis = &self.blocks[0];
        if !genesis.is_genesis()
            || genesis.prev_hash != genesis_anchor(&self.label)
            || !genesis.rewards.is_empty()
            || !genesis.updates.is_empty()
            || genesis.signature != Signature::ZERO
        {
            return Err(LedgerError::Audit("first block is not a genesis block".into()));
        }
        genesis.verify(registry)?;
        for pair in self.blocks.windows(2) {
            let (prev, b) = (&pair[0], &pair[1]);
            if b.round <= prev.round {
                return Err(LedgerError::RoundNotMonotone {
                    round: b.round,
                    head: prev.round,
                });
            }
            if b.prev_hash != prev.hash || b.is_genesis() {
                return Err(LedgerError::LinkMismatch { round: b.round });
            }
            b.verify(registry)?;
        }
        Ok(())
    }

    /// Stakes obtained by replaying every block.
    pub fn replay_stakes(&self) -> StakeLedger {
        let mut s = StakeLedger::default();
        for b in &self.blocks {
            s.credit(b);
        }
        s
    }

    /// Render this chain as one dump section.
    pub fn dump(&self, registry: &KeyRegistry) -> String {
        let mut out = String::new();
        writeln!(out, "dfloc-chain v1 {}", self.label).unwrap();
        let miners: BTreeSet<u32> = self
            .blocks
            .iter()
            .filter(|b| !b.is_genesis())
            .map(|b| b.miner_id)
            .collect();
        for m in miners {
            let key = registry.get(&m).map(|k| hex::encode(k.0)).unwrap_or_default();
            writeln!(out, "key {m} {key}").unwrap();
        }
        let mut total = 0u64;
        for b in &self.blocks {
            total += b.reward_total();
            writeln!(out, "block {}", b.round).unwrap();
            writeln!(out, "prev {}", b.prev_hash).unwrap();
            if b.miner_id == GENESIS_MINER {
                writeln!(out, "miner genesis").unwrap();
            } else {
                writeln!(out, "miner {}", b.miner_id).unwrap();
            }
            writeln!(out, "base {}", b.base_model).unwrap();
            for u in &b.updates {
                writeln!(
                    out,
                    "update {} {} {} {} {}",
                    u.worker_id, u.sample_count, u.update_digest, u.votes.positive, u.votes.negative
                )
                .unwrap();
            }
            for r in &b.rewards {
                writeln!(out, "reward {} {} {}", r.device_id, r.role.as_str(), r.amount).unwrap();
            }
            writeln!(out, "hash {}", b.hash).unwrap();
            writeln!(out, "sig {}", hex::encode(b.signature.0)).unwrap();
            writeln!(out, "stake_total {total}").unwrap();
            writeln!(out, "end").unwrap();
        }
        out
    }
}

/// A chain recovered from a dump, with the keys it listed.
#[derive(Clone, Debug)]
pub struct ParsedChain {
    pub registry: KeyRegistry,
    pub chain: Chain,
    pub stake_totals: Vec<u64>,
}

/// Parse a dump into its chain sections.
pub fn parse_dump(text: &str) -> Result<Vec<ParsedChain>> {
    let mut lines = text.split_inclusive('\n').enumerate().peekable();
    let mut sections = Vec::new();
    let err = |line: usize, reason: &str| LedgerError::Parse {
        line: line + 1,
        reason: reason.to_string(),
    };

    fn fields(line: &str) -> Option<Vec<&str>> {
        line.strip_suffix('\n').map(|l| l.split(' ').collect())
    }
    fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
        if s.is_empty() || (s.len() > 1 && s.starts_with('0')) || s.starts_with('+') {
            return None;
        }
        s.parse().ok()
    }

    while let Some((ln, line)) = lines.next() {
        let f = fields(line).ok_or_else(|| err(ln, "missing newline"))?;
        let label = match f.as_slice() {
            ["dfloc-chain", "v1", label] => label.to_string(),
            _ => return Err(err(ln, "expected section header")),
        };
        let mut registry = KeyRegistry::new();
        while let Some((ln, line)) = lines.peek().copied() {
            let f = fields(line).ok_or_else(|| err(ln, "missing newline"))?;
            if f[0] != "key" {
                break;
            }
            lines.next();
            let (id, key) = match f.as_slice() {
                ["key", id, key] => (num::<u32>(id), Digest::from_hex(key)),
                _ => return Err(err(ln, "bad key line")),
            };
            let (Some(id), Some(key)) = (id, key) else {
                return Err(err(ln, "bad key line"));
            };
            registry.insert(id, PublicKey(key.0));
        }

        let mut blocks = Vec::new();
        let mut stake_totals = Vec::new();
        while let Some((ln, line)) = lines.peek().copied() {
            let f = fields(line).ok_or_else(|| err(ln, "missing newline"))?;
            if f[0] != "block" {
                break;
            }
            lines.next();
            let round = match f.as_slice() {
                ["block", r] => num::<u64>(r).ok_or_else(|| err(ln, "bad round"))?,
                _ => return Err(err(ln, "bad block line")),
            };
            let mut next = |tag: &str| -> Result<(usize, Vec<String>)> {
                let (ln, line) = lines.next().ok_or_else(|| err(ln, "unexpected end of dump"))?;
                let f = fields(line).ok_or_else(|| err(ln, "missing newline"))?;
                if f[0] != tag {
                    return Err(err(ln, &format!("expected `{tag}`")));
                }
                Ok((ln, f[1..].iter().map(|s| s.to_string()).collect()))
            };
            let one_digest = |(ln, v): (usize, Vec<String>)| -> Result<Digest> {
                match v.as_slice() {
                    [h] => Digest::from_hex(h).ok_or_else(|| err(ln, "bad digest")),
                    _ => Err(err(ln, "expected one digest")),
                }
            };
            let prev_hash = one_digest(next("prev")?)?;
            let (mln, m) = next("miner")?;
            let miner_id = match m.as_slice() {
                [s] if s == "genesis" => GENESIS_MINER,
                [s] => num::<u32>(s)
                    .filter(|&id| id != GENESIS_MINER)
                    .ok_or_else(|| err(mln, "bad miner"))?,
                _ => return Err(err(mln, "bad miner")),
            };
            let base_model = one_digest(next("base")?)?;
            let mut updates = Vec::new();
            let mut rewards = Vec::new();
            let hash = loop {
                let (ln, line) = lines.next().ok_or_else(|| err(ln, "unexpected end of dump"))?;
                let f = fields(line).ok_or_else(|| err(ln, "missing newline"))?;
                match f.as_slice() {
                    ["update", w, n, d, p, q] => {
                        if !rewards.is_empty() {
                            return Err(err(ln, "update after reward"));
                        }
                        let rec = (|| {
                            Some(UpdateRecord {
                                worker_id: num(w)?,
                                sample_count: num(n)?,
                                update_digest: Digest::from_hex(d)?,
                                votes: VoteTally {
                                    positive: num(p)?,
                                    negative: num(q)?,
                                },
                            })
                        })()
                        .ok_or_else(|| err(ln, "bad update line"))?;
                        updates.push(rec);
                    }
                    ["reward", id, role, amount] => {
                        let rec = (|| {
                            Some(RewardRecord {
                                device_id: num(id)?,
                                role: Role::parse(role)?,
                                amount: num(amount)?,
                            })
                        })()
                        .ok_or_else(|| err(ln, "bad reward line"))?;
                        rewards.push(rec);
                    }
                    ["hash", h] => break Digest::from_hex(h).ok_or_else(|| err(ln, "bad hash"))?,
                    _ => return Err(err(ln, "expected update, reward or hash")),
                }
            };
            let mut next = |tag: &str| -> Result<(usize, Vec<String>)> {
                let (ln, line) = lines.next().ok_or_else(|| err(ln, "unexpected end of dump"))?;
                let f = fields(line).ok_or_else(|| err(ln, "missing newline"))?;
                if f[0] != tag {
                    return Err(err(ln, &format!("expected `{tag}`")));
                }
                Ok((ln, f[1..].iter().map(|s| s.to_string()).collect()))
            };
            let (sln, s) = next("sig")?;
            let mut sig = [0u8; 64];
            match s.as_slice() {
                [h] if hex::decode_to_slice(h, &mut sig).is_ok() => {}
                _ => return Err(err(sln, "bad signature")),
            }
            let (tln, t) = next("stake_total")?;
            let total = match t.as_slice() {
                [v] => num::<u64>(v).ok_or_else(|| err(tln, "bad stake total"))?,
                _ => return Err(err(tln, "bad stake total")),
            };
            let (eln, e) = next("end")?;
            if !e.is_empty() {
                return Err(err(eln, "trailing fields after end"));
            }
            stake_totals.push(total);
            blocks.push(Block {
                round,
                prev_hash,
                miner_id,
                base_model,
                updates,
                rewards,
                hash,
                signature: Signature(sig),
            });
        }
        if blocks.is_empty() {
            return Err(err(ln, "section without blocks"));
        }
        sections.push(ParsedChain {
            registry,
            chain: Chain { label, blocks },
            stake_totals,
        });
    }
    if sections.is_empty() {
        return Err(err(0, "empty dump"));
    }
    Ok(sections)
}

/// Summary of a successful audit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub chains: Vec<(String, usize, u64)>,
}

/// Verify a dump: canonical form, genesis, linkage, hashes, signatures, the
/// listed key set, and the running stake totals.
pub fn audit_dump(text: &str) -> Result<AuditReport> {
    let sections = parse_dump(text)?;
    let mut canonical = String::new();
    let mut report = Vec::new();
    for s in &sections {
        s.chain.verify(&s.registry)?;
        let miners: BTreeSet<u32> = s
            .chain
            .blocks()
            .iter()
            .filter(|b| !b.is_genesis())
            .map(|b| b.miner_id)
            .collect();
        if miners.iter().ne(s.registry.keys()) {
            return Err(LedgerError::Audit(format!(
                "chain {}: key list does not match the set of miners",
                s.chain.label()
            )));
        }
        let mut running = 0u64;
        for (b, &recorded) in s.chain.blocks().iter().zip(&s.stake_totals) {
            running += b.reward_total();
            if running != recorded {
                return Err(LedgerError::Audit(format!(
                    "chain {}: stake total after round {} is {running}, dump says {recorded}",
                    s.chain.label(), b.round
                )));
            }
        }
        canonical.push_str(&s.chain.dump(&s.registry));
        report.push((s.chain.label().to_string(), s.chain.len(), running));
    }
    if canonical != text {
        return Err(LedgerError::Audit("dump is not in canonical form".into()));
    }
    Ok(AuditReport { chains: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry(kps: &[&KeyPair]) -> KeyRegistry {
        kps.iter().map(|k| (k.device_id, k.public())).collect()
    }

    fn rewards(miner: u32, amount: u64) -> Vec<RewardRecord> {
        vec![
            RewardRecord {
                device_id: 1,
                role: Role::Worker,
                amount,
            },
            RewardRecord {
                device_id: miner,
                role: Role::Miner,
                amount: 60,
            },
        ]
    }

    fn update(worker: u32, pos: u32, neg: u32) -> UpdateRecord {
        UpdateRecord {
            worker_id: worker,
            sample_count: 80,
            update_digest: Digest::of(&worker.to_le_bytes()),
            votes: VoteTally {
                positive: pos,
                negative: neg,
            },
        }
    }

    #[test]
    fn keygen_is_deterministic_and_domain_separated() {
        let a = keygen(3, 42);
        assert_eq!(a.secret(), keygen(3, 42).secret());
        assert_eq!(a.public(), keygen(3, 42).public());
        assert_ne!(a.public(), keygen(4, 42).public());
        assert_ne!(a.public(), keygen(3, 43).public());
    }

    #[test]
    fn signatures() {
        let kp = keygen(1, 7);
        let other = keygen(2, 7);
        let m = b"worker transaction".to_vec();
        let sig = sign(&kp, &m);
        assert!(verify(&kp.public(), &m, &sig));
        assert!(!verify(&other.public(), &m, &sig));
        for i in 0..m.len() {
            let mut bad = m.clone();
            bad[i] ^= 0x20;
            assert!(!verify(&kp.public(), &bad, &sig));
        }
        for i in 0..64 {
            let mut bad = sig;
            bad.0[i] ^= 0x01;
            assert!(!verify(&kp.public(), &m, &bad));
        }
        assert!(!verify(&kp.public(), &m, &sig.corrupted()));
    }

    #[test]
    fn mined_blocks_detect_tampering() {
        let kp = keygen(17, 1);
        let reg = registry(&[&kp]);
        let b = mine_candidate(1, Digest::ZERO, Digest::of(b"g"), vec![update(1, 3, 2)], rewards(17, 8000), &kp);
        assert!(b.verify(&reg).is_ok());
        let mut t = b.clone();
        t.updates[0].votes.negative = 4;
        assert_eq!(t.verify(&reg), Err(LedgerError::HashMismatch { round: 1 }));
        let mut t = b.clone();
        t.rewards[0].amount += 1;
        assert!(t.verify(&reg).is_err());
        let mut t = b.clone();
        t.signature = t.signature.corrupted();
        assert!(matches!(t.verify(&reg), Err(LedgerError::BadSignature { .. })));
    }

    #[test]
    fn same_content_different_miners() {
        let (a, b) = (keygen(1, 1), keygen(2, 1));
        let ups = vec![update(5, 3, 2)];
        let x = mine_candidate(1, Digest::ZERO, Digest::ZERO, ups.clone(), vec![], &a);
        let y = mine_candidate(1, Digest::ZERO, Digest::ZERO, ups, vec![], &b);
        assert_ne!(x.signature, y.signature);
        assert_eq!((x.updates.clone(), x.rewards.clone()), (y.updates.clone(), y.rewards.clone()));
        assert_ne!(x.hash, y.hash);
    }

    #[test]
    fn selection_by_stake_then_lowest_id() {
        let kps: Vec<KeyPair> = (1..=3).map(|i| keygen(i, 0)).collect();
        let cands: Vec<Block> = kps
            .iter()
            .map(|k| mine_candidate(1, Digest::ZERO, Digest::ZERO, vec![], vec![], k))
            .collect();
        let mut stakes = StakeLedger::default();
        assert_eq!(select_legitimate(&cands, &stakes).unwrap().miner_id, 1);
        stakes.balances.insert(1, 10);
        stakes.balances.insert(2, 30);
        stakes.balances.insert(3, 20);
        assert_eq!(select_legitimate(&cands, &stakes).unwrap().miner_id, 2);
        stakes.balances.insert(3, 30);
        assert_eq!(select_legitimate(&cands, &stakes).unwrap().miner_id, 2);
        assert_eq!(select_legitimate(&cands[2..], &stakes).unwrap().miner_id, 3);
        assert_eq!(select_legitimate(&[], &stakes), Err(LedgerError::NoCandidates));
    }

    #[test]
    fn append_credits_exact_rewards_and_rejects_bad_links() {
        let kp = keygen(9, 3);
        let reg = registry(&[&kp]);
        let mut chain = Chain::new("t", Digest::of(b"seed"));
        let mut stakes = StakeLedger::default();
        let b1 = mine_candidate(1, chain.head().hash, Digest::of(b"seed"), vec![], rewards(9, 8600), &kp);
        assert_eq!(b1.reward_total(), 8660);
        chain.append_block(b1.clone(), &mut stakes, &reg).unwrap();
        assert_eq!(stakes.total(), 8660);
        assert_eq!(stakes.stake(9), 60);

        let replay = chain.append_block(b1, &mut stakes, &reg);
        assert!(matches!(replay, Err(LedgerError::RoundNotMonotone { .. })));

        let bad = mine_candidate(2, Digest::of(b"elsewhere"), Digest::ZERO, vec![], vec![], &kp);
        assert_eq!(chain.append_block(bad, &mut stakes, &reg), Err(LedgerError::LinkMismatch { round: 2 }));

        let stranger = keygen(10, 3);
        let unknown = mine_candidate(2, chain.head().hash, Digest::ZERO, vec![], vec![], &stranger);
        assert_eq!(chain.append_block(unknown, &mut stakes, &reg), Err(LedgerError::UnknownMiner(10)));
        assert_eq!(chain.len(), 2);
        assert_eq!(stakes.total(), 8660);
        assert_eq!(chain.replay_stakes(), stakes);
    }

    fn sample_chain() -> (Chain, KeyRegistry) {
        sample_chain_labeled("t")
    }

    fn sample_chain_labeled(label: &str) -> (Chain, KeyRegistry) {
        let kps: Vec<KeyPair> = (0..3).map(|i| keygen(i, 5)).collect();
        let reg = registry(&kps.iter().collect::<Vec<_>>());
        let mut chain = Chain::new(label, Digest::of(b"seed"));
        let mut stakes = StakeLedger::default();
        for round in 1..=3u64 {
            let kp = &kps[round as usize % 3];
            let b = mine_candidate(
                round,
                chain.head().hash,
                Digest::of(&round.to_le_bytes()),
                vec![update(1, 3, 2), update(4, 2, 3)],
                rewards(kp.device_id, 100 * round),
                kp,
            );
            chain.append_block(b, &mut stakes, &reg).unwrap();
        }
        (chain, reg)
    }

    #[test]
    fn dump_round_trips_and_audits() {
        let (chain, reg) = sample_chain();
        let text = chain.dump(&reg);
        let report = audit_dump(&text).unwrap();
        assert_eq!(report.chains, vec![("t".to_string(), 4, 100 + 200 + 300 + 180)]);
        let parsed = parse_dump(&text).unwrap();
        assert_eq!(parsed[0].chain, chain);

        let mut other = chain.clone();
        other.label = "u".into();
        assert!(other.verify(&reg).is_err());
        let two = format!("{text}{}", sample_chain_labeled("u").0.dump(&reg));
        assert_eq!(audit_dump(&two).unwrap().chains.len(), 2);
    }

    #[test]
    fn every_single_byte_tamper_fails_the_audit() {
        let (chain, reg) = sample_chain();
        let text = chain.dump(&reg).into_bytes();
        for i in 0..text.len() {
            for &replacement in b"01a \n9" {
                if text[i] == replacement {
                    continue;
                }
                let mut t = text.clone();
                t[i] = replacement;
                let Ok(s) = String::from_utf8(t) else { continue };
                assert!(audit_dump(&s).is_err(), "tamper at byte {i} -> {:?} passed", replacement as char);
            }
        }
    }
}
