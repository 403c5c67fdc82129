//! Localization networks: the building/floor classifier (BFC) and the
//! latitude/longitude regressor (LLR), their training, evaluation and the
//! parameter-vector operations used by federated aggregation.

mod aggregate;
mod loss;
mod network;
mod optim;
mod train;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, CoordBounds, FingerprintSample, LABEL_BITS, NUM_APS};

pub use aggregate::{coordinatewise_median, fedavg, inject_gaussian_noise, uniform_in_init_range};
pub use loss::{loss_bce, loss_l1, BCE_EPSILON};
pub use network::Network;
pub use optim::Adam;
pub use train::{error_3d, evaluate_bfc, evaluate_llr, train_local};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("parameter vector does not match the model: {0}")]
    Mismatch(String),
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("empty evaluation set")]
    EmptyTestSet,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bfc,
    Llr,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Bfc => "bfc",
            ModelKind::Llr => "llr",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture description. Conv fields only matter for BFC with `use_conv`;
/// `hidden_width` only matters for LLR.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub extractor_width: usize,
    pub use_conv: bool,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
}

impl ModelSpec {
    /// Dense 520->128 + ReLU, conv1d (4 channels, kernel 5) + ReLU, dense ->8, sigmoid.
    pub fn bfc_default() -> Self {
        ModelSpec {
            kind: ModelKind::Bfc,
            input_dim: NUM_APS,
            extractor_width: 128,
            use_conv: true,
            conv_channels: 4,
            conv_kernel: 5,
            hidden_width: 0,
            output_dim: LABEL_BITS,
        }
    }

    /// Dense 520->128 + ReLU, dense 128->64 + ReLU, dense ->2.
    pub fn llr_default() -> Self {
        ModelSpec {
            kind: ModelKind::Llr,
            input_dim: NUM_APS,
            extractor_width: 128,
            use_conv: false,
            conv_channels: 0,
            conv_kernel: 0,
            hidden_width: 64,
            output_dim: 2,
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Bfc => Self::bfc_default(),
            ModelKind::Llr => Self::llr_default(),
        }
    }

    pub fn without_conv(mut self) -> Self {
        self.use_conv = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        let want_out = match self.kind {
            ModelKind::Bfc => LABEL_BITS,
            ModelKind::Llr => 2,
        };
        if self.output_dim != want_out {
            return bad(&format!("{} output_dim must be {want_out}", self.kind));
        }
        if self.input_dim == 0 || self.extractor_width == 0 {
            return bad("input_dim and extractor_width must be positive");
        }
        if self.kind == ModelKind::Bfc && self.use_conv {
            if self.conv_channels == 0 || self.conv_kernel == 0 {
                return bad("conv_channels and conv_kernel must be positive");
            }
            if self.conv_kernel > self.extractor_width {
                return bad("conv_kernel exceeds extractor_width");
            }
        }
        if self.kind == ModelKind::Llr && self.hidden_width == 0 {
            return bad("hidden_width must be positive");
        }
        Ok(())
    }

    /// Stable 64-bit identity of the architecture; only fields that shape the
    /// parameter layout take part.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        let conv = self.kind == ModelKind::Bfc && self.use_conv;
        let fields = [
            self.kind as u64,
            self.input_dim as u64,
            self.extractor_width as u64,
            conv as u64,
            if conv { self.conv_channels as u64 } else { 0 },
            if conv { self.conv_kernel as u64 } else { 0 },
            if self.kind == ModelKind::Llr { self.hidden_width as u64 } else { 0 },
            self.output_dim as u64,
        ];
        for f in fields {
            h.update(f.to_le_bytes());
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    pub fn network(&self) -> Result<Network> {
        self.validate()?;
        Ok(Network::build(self))
    }
}

/// Flat model parameters tagged with the architecture that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    spec_fingerprint: u64,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, spec_fingerprint: u64) -> Self {
        ParamVector {
            values,
            spec_fingerprint,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn spec_fingerprint(&self) -> u64 {
        self.spec_fingerprint
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over the fingerprint and the little-endian bytes of every value.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.spec_fingerprint.to_le_bytes());
        h.update((self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Local optimization settings. Defaults follow the BFC configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::bfc_default()
    }
}

impl Hyperparams {
    pub fn bfc_default() -> Self {
        Hyperparams {
            learning_rate: 0.001,
            batch_size: 100,
            local_epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }

    pub fn llr_default() -> Self {
        Hyperparams {
            learning_rate: 0.002,
            ..Self::bfc_default()
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Bfc => Self::bfc_default(),
            ModelKind::Llr => Self::llr_default(),
        }
    }

    pub fn with_epochs(&self, local_epochs: usize) -> Self {
        Hyperparams {
            local_epochs,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::InvalidHyperparams("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(ModelError::InvalidHyperparams(
                "batch_size and local_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A network bound to the coordinate frame its regression targets live in.
///
/// LLR targets are latitude/longitude scaled to `[0, 1]` by `bounds`; BFC
/// ignores the bounds for training but uses them when it must emit a random
/// in-range output.
#[derive(Clone, Debug)]
pub struct Task {
    network: Network,
    bounds: CoordBounds,
}

/// One model output after decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prediction {
    Bfc { building: u8, floor: u8 },
    /// Meters.
    Llr { latitude: f64, longitude: f64 },
}

impl Task {
    pub fn new(spec: &ModelSpec, bounds: CoordBounds) -> Result<Self> {
        Ok(Task {
            network: spec.network()?,
            bounds,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.network.spec().kind
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn spec(&self) -> &ModelSpec {
        self.network.spec()
    }

    pub fn bounds(&self) -> CoordBounds {
        self.bounds
    }

    pub fn fingerprint(&self) -> u64 {
        self.spec().fingerprint()
    }

    /// Fresh parameters: Kaiming-uniform weights, zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        ParamVector::new(self.network.init_values(rng), self.fingerprint())
    }

    pub fn check(&self, params: &ParamVector) -> Result<()> {
        if params.spec_fingerprint() != self.fingerprint() || params.len() != self.network.param_count() {
            return Err(ModelError::Mismatch(format!(
                "expected {} values for spec {:016x}, got {} for {:016x}",
                self.network.param_count(),
                self.fingerprint(),
                params.len(),
                params.spec_fingerprint()
            )));
        }
        Ok(())
    }

    /// Training target for a sample: label bits or normalized coordinates.
    pub fn target(&self, s: &FingerprintSample) -> Vec<f64> {
        match self.kind() {
            ModelKind::Bfc => s.label_bits().to_vec(),
            ModelKind::Llr => self.bounds.normalize(s.latitude, s.longitude).to_vec(),
        }
    }

    /// Raw network output: 8 probabilities (BFC) or 2 normalized coordinates (LLR).
    pub fn raw_output(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check(params)?;
        if x.len() != self.spec().input_dim {
            return Err(ModelError::Mismatch(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.spec().input_dim
            )));
        }
        Ok(self.network.forward(params.values(), x))
    }

    /// Decode a raw output (BFC probabilities or normalized LLR coordinates).
    pub fn decode(&self, raw: &[f64]) -> Prediction {
        match self.kind() {
            ModelKind::Bfc => {
                let (building, floor) = decode_bfc(raw);
                Prediction::Bfc { building, floor }
            }
            ModelKind::Llr => {
                let (latitude, longitude) = self.bounds.denormalize([raw[0], raw[1]]);
                Prediction::Llr {
                    latitude,
                    longitude,
                }
            }
        }
    }

    pub fn predict(&self, params: &ParamVector, x: &[f64]) -> Result<Prediction> {
        Ok(self.decode(&self.raw_output(params, x)?))
    }

    /// Mean loss over `batch` and its exact gradient.
    pub fn loss_and_gradient(&self, params: &ParamVector, batch: &[&FingerprintSample]) -> Result<(f64, Vec<f64>)> {
        self.check(params)?;
        let mut grad = vec![0.0; params.len()];
        let loss = self.accumulate_gradient(params.values(), batch, &mut grad);
        Ok((loss, grad))
    }

    /// Adds the mean-loss gradient into `grad` (which the caller zeroes) and
    /// returns the mean loss.
    pub(crate) fn accumulate_gradient(&self, p: &[f64], batch: &[&FingerprintSample], grad: &mut [f64]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let scale = 1.0 / batch.len() as f64;
        let mut acts = Vec::new();
        let mut scratch = Vec::new();
        let mut total = 0.0;
        for s in batch {
            self.network.forward_trace(p, &s.rss, &mut acts);
            let out = acts.last().expect("network has layers");
            let target = self.target(s);
            let (loss, mut dout) = match self.kind() {
                ModelKind::Bfc => loss::bce_with_grad(out, &target),
                ModelKind::Llr => loss::l1_with_grad(out, &target),
            };
            total += loss;
            for d in &mut dout {
                *d *= scale;
            }
            self.network.backward_trace(p, &s.rss, &acts, dout, grad, &mut scratch);
        }
        total * scale
    }

    /// Mean loss over a dataset (no gradient).
    pub fn mean_loss(&self, params: &ParamVector, data: &dataset::Dataset) -> Result<f64> {
        self.check(params)?;
        if data.is_empty() {
            return Err(ModelError::EmptyTestSet);
        }
        let total: f64 = data
            .samples()
            .iter()
            .map(|s| {
                let out = self.network.forward(params.values(), &s.rss);
                let t = self.target(s);
                match self.kind() {
                    ModelKind::Bfc => loss_bce(&out, &t),
                    ModelKind::Llr => loss_l1(&out, &t),
                }
            })
            .sum();
        Ok(total / data.len() as f64)
    }
}

/// Building = argmax of positions 0..3, floor = argmax of positions 3..8.
pub fn decode_bfc(probs: &[f64]) -> (u8, u8) {
    dataset::decode_building_floor(probs)
}
