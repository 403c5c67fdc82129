use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::dataset::SyntheticConfig;
use crate::model::{Hyperparams, ModelKind, ModelSpec};
use crate::protocol::{FaultSchedule, ProtocolParams, RoleCounts, System};
use crate::rng;

/// Which network(s) an experiment trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KindSelection {
    #[default]
    #[serde(rename = "bfc")]
    Bfc,
    #[serde(rename = "llr")]
    Llr,
    /// Both networks, joined into the 3D error.
    #[serde(rename = "3d")]
    Both3d,
}

impl KindSelection {
    pub fn as_str(self) -> &'static str {
        match self {
            KindSelection::Bfc => "bfc",
            KindSelection::Llr => "llr",
            KindSelection::Both3d => "3d",
        }
    }

    pub fn kinds(self) -> &'static [ModelKind] {
        match self {
            KindSelection::Bfc => &[ModelKind::Bfc],
            KindSelection::Llr => &[ModelKind::Llr],
            KindSelection::Both3d => &[ModelKind::Bfc, ModelKind::Llr],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Ujiindoorloc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// UJIIndoorLoc CSV files, concatenated in order.
    pub paths: Vec<PathBuf>,
    /// Share of all samples held out as the global test set.
    pub test_fraction: f64,
    /// Share of each client shard kept as that client's private test set.
    pub local_test_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DataSource::Synthetic,
            paths: Vec::new(),
            test_fraction: 0.2,
            local_test_fraction: 0.2,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub bfc: f64,
    pub llr: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { bfc: 0.1, llr: 0.9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub malicious_count: usize,
    pub sigma: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            malicious_count: 0,
            sigma: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub master: u64,
    /// Split and partition seed; derived from `master` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    /// Roles, faults, keys, initialization and local training; derived from `master` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            master: 1,
            data: None,
            protocol: None,
        }
    }
}

impl SeedConfig {
    pub fn data_seed(&self) -> u64 {
        self.data.unwrap_or_else(|| rng::derive_seed(self.master, "data", &[]))
    }

    pub fn protocol_seed(&self) -> u64 {
        self.protocol.unwrap_or_else(|| rng::derive_seed(self.master, "protocol", &[]))
    }
}

/// Optional architecture overrides on top of the per-kind default.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_conv: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
}

/// Optional optimizer overrides on top of the per-kind default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_epsilon: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KindConfig {
    /// Communication rounds; 100 for BFC and 500 for LLR when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u64>,
    pub model: ModelOverrides,
    pub hyper: HyperOverrides,
}

impl KindConfig {
    pub fn rounds(&self, kind: ModelKind) -> u64 {
        self.rounds.unwrap_or(match kind {
            ModelKind::Bfc => 100,
            ModelKind::Llr => 500,
        })
    }

    pub fn spec(&self, kind: ModelKind) -> ModelSpec {
        let mut s = ModelSpec::default_for(kind);
        let m = &self.model;
        if let Some(v) = m.extractor_width {
            s.extractor_width = v;
        }
        if let Some(v) = m.use_conv {
            s.use_conv = v;
        }
        if let Some(v) = m.conv_channels {
            s.conv_channels = v;
        }
        if let Some(v) = m.conv_kernel {
            s.conv_kernel = v;
        }
        if let Some(v) = m.hidden_width {
            s.hidden_width = v;
        }
        s
    }

    pub fn hyper(&self, kind: ModelKind) -> Hyperparams {
        let mut h = Hyperparams::default_for(kind);
        let o = &self.hyper;
        if let Some(v) = o.learning_rate {
            h.learning_rate = v;
        }
        if let Some(v) = o.batch_size {
            h.batch_size = v;
        }
        if let Some(v) = o.local_epochs {
            h.local_epochs = v;
        }
        if let Some(v) = o.adam_beta1 {
            h.adam_beta1 = v;
        }
        if let Some(v) = o.adam_beta2 {
            h.adam_beta2 = v;
        }
        if let Some(v) = o.adam_epsilon {
            h.adam_epsilon = v;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Repetitions with fresh faulty-device draws when faults affect inference.
    pub trials: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { trials: 5 }
    }
}

/// Everything that defines one experiment. Every field has a default, and
/// unknown keys anywhere in the file are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: System,
    pub kind: KindSelection,
    pub device_count: usize,
    pub unit_reward: u64,
    /// Weight FedAvg by local sample counts; `false` averages uniformly.
    pub weighted_fedavg: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub roles: RoleCounts,
    pub thresholds: Thresholds,
    pub attack: AttackConfig,
    pub faults: FaultSchedule,
    pub seeds: SeedConfig,
    pub bfc: KindConfig,
    pub llr: KindConfig,
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: System::Dfl,
            kind: KindSelection::Bfc,
            device_count: 20,
            unit_reward: 1,
            weighted_fedavg: true,
            output_dir: None,
            dataset: DatasetConfig::default(),
            roles: RoleCounts::default(),
            thresholds: Thresholds::default(),
            attack: AttackConfig::default(),
            faults: FaultSchedule::default(),
            seeds: SeedConfig::default(),
            bfc: KindConfig::default(),
            llr: KindConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

fn invalid(path: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::ConfigSyntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn kind_config(&self, kind: ModelKind) -> &KindConfig {
        match kind {
            ModelKind::Bfc => &self.bfc,
            ModelKind::Llr => &self.llr,
        }
    }

    pub fn kind_config_mut(&mut self, kind: ModelKind) -> &mut KindConfig {
        match kind {
            ModelKind::Bfc => &mut self.bfc,
            ModelKind::Llr => &mut self.llr,
        }
    }

    pub fn rounds(&self, kind: ModelKind) -> u64 {
        self.kind_config(kind).rounds(kind)
    }

    pub fn protocol_params(&self, kind: ModelKind) -> ProtocolParams {
        ProtocolParams {
            role_counts: self.roles,
            hyper: self.kind_config(kind).hyper(kind),
            threshold: match kind {
                ModelKind::Bfc => self.thresholds.bfc,
                ModelKind::Llr => self.thresholds.llr,
            },
            unit_reward: self.unit_reward,
            sigma: self.attack.sigma,
            faults: self.faults,
            weighted_fedavg: self.weighted_fedavg,
        }
    }

    /// Check cross-field constraints; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.device_count == 0 {
            return Err(invalid("device_count", "must be at least 1"));
        }
        if self.device_count > u32::MAX as usize - 1 {
            return Err(invalid("device_count", "too large"));
        }
        if self.roles.total() != self.device_count {
            return Err(invalid(
                "roles",
                format!(
                    "workers + validators + miners = {} but device_count = {}",
                    self.roles.total(),
                    self.device_count
                ),
            ));
        }
        if self.system == System::Dfl && self.roles.miners == 0 {
            return Err(invalid("roles.miners", "a decentralized run needs at least one miner"));
        }
        if self.attack.malicious_count > self.device_count {
            return Err(invalid("attack.malicious_count", "exceeds device_count"));
        }
        if !(self.attack.sigma >= 0.0 && self.attack.sigma.is_finite()) {
            return Err(invalid("attack.sigma", "must be finite and non-negative"));
        }
        let fault_population = match self.system {
            System::Dfl => self.device_count,
            System::Cfl => self.device_count + 1,
        };
        if self.faults.count > fault_population {
            return Err(invalid(
                "faults.count",
                format!("at most {fault_population} entities can fail in a {} run", self.system),
            ));
        }
        for (path, t) in [("thresholds.bfc", self.thresholds.bfc), ("thresholds.llr", self.thresholds.llr)] {
            if !t.is_finite() {
                return Err(invalid(path, "must be finite"));
            }
        }
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        if !frac_ok(self.dataset.test_fraction) {
            return Err(invalid("dataset.test_fraction", "must lie strictly between 0 and 1"));
        }
        if !frac_ok(self.dataset.local_test_fraction) {
            return Err(invalid("dataset.local_test_fraction", "must lie strictly between 0 and 1"));
        }
        if self.dataset.source == DataSource::Ujiindoorloc && self.dataset.paths.is_empty() {
            return Err(invalid("dataset.paths", "the ujiindoorloc source needs at least one CSV path"));
        }
        if self.dataset.source == DataSource::Synthetic && self.dataset.synthetic.num_samples == 0 {
            return Err(invalid("dataset.synthetic.num_samples", "must be at least 1"));
        }
        for kind in [ModelKind::Bfc, ModelKind::Llr] {
            let k = self.kind_config(kind);
            k.spec(kind)
                .validate()
                .map_err(|e| invalid(&format!("{kind}.model"), e.to_string()))?;
            k.hyper(kind)
                .validate()
                .map_err(|e| invalid(&format!("{kind}.hyper"), e.to_string()))?;
        }
        if self.inference.trials == 0 {
            return Err(invalid("inference.trials", "must be at least 1"));
        }
        Ok(())
    }
}
