//! Deterministic desk-scale simulator of decentralized federated learning for
//! WiFi fingerprint indoor localization.
//!
//! Devices take turns as workers, validators and miners. Workers train local
//! updates, validators vote on them against a one-epoch proxy model, miners tally
//! the votes into signed candidate blocks, and the block from the highest-stake
//! miner decides which updates are averaged into the next global model. A
//! centralized baseline with the same training path is provided for comparison,
//! together with malicious-update and device-fault injection.

pub mod baseline;
pub mod dataset;
pub mod harness;
pub mod ledger;
pub mod model;
pub mod protocol;
pub mod rng;

pub use dataset::{ClientShard, CoordBounds, Dataset, FingerprintSample};
pub use model::{Hyperparams, ModelKind, ModelSpec, Network, ParamVector, Task};
