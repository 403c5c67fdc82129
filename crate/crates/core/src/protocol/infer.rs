use std::collections::BTreeSet;

use rand::Rng;

use crate::model::{coordinatewise_median, ModelKind, ParamVector, Prediction, Result, Task};

/// A random raw output within the data range: 8 uniform probabilities for
/// BFC, uniform normalized coordinates (uniform within the bounds) for LLR.
pub fn random_raw_output<R: Rng>(kind: ModelKind, rng: &mut R) -> Vec<f64> {
    let n = match kind {
        ModelKind::Bfc => crate::dataset::LABEL_BITS,
        ModelKind::Llr => 2,
    };
    (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect()
}

/// Decentralized inference: every device evaluates the global model, faulty
/// devices answer at random, and the coordinatewise median of all raw outputs
/// is decoded.
pub fn infer_dfl<R: Rng>(
    task: &Task,
    global: &ParamVector,
    x: &[f64],
    device_ids: &[u32],
    faulty: &BTreeSet<u32>,
    rng: &mut R,
) -> Result<Prediction> {
    let honest = task.raw_output(global, x)?;
    let outputs: Vec<Vec<f64>> = device_ids
        .iter()
        .map(|id| {
            if faulty.contains(id) {
                random_raw_output(task.kind(), rng)
            } else {
                honest.clone()
            }
        })
        .collect();
    Ok(task.decode(&coordinatewise_median(&outputs)))
}
