use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, Network, ParamVector, Result};

/// Weighted elementwise mean; weights are typically local sample counts.
///
/// Updates are put in a canonical content order and averaged as offsets from
/// the first one, so the result is bit-identical under any permutation of the
/// input and equals the input when all updates are the same vector.
pub fn fedavg(updates: &[(&ParamVector, f64)]) -> Result<ParamVector> {
    let (first, _) = updates.first().ok_or(ModelError::NoUpdates)?;
    let n = first.len();
    for (u, w) in updates {
        if u.len() != n || u.spec_fingerprint() != first.spec_fingerprint() {
            return Err(ModelError::Mismatch("updates disagree in shape".into()));
        }
        if !(*w > 0.0) {
            return Err(ModelError::Mismatch(format!("aggregation weight {w} must be positive")));
        }
    }
    let mut ordered: Vec<(&ParamVector, f64)> = updates.to_vec();
    ordered.sort_by(|(a, wa), (b, wb)| {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(wa.total_cmp(wb))
    });
    let total_weight: f64 = ordered.iter().map(|(_, w)| w).sum();
    let base = ordered[0].0.values();
    let mut offset = vec![0.0; n];
    for (u, w) in &ordered[1..] {
        let share = w / total_weight;
        for ((o, v), b) in offset.iter_mut().zip(u.values()).zip(base) {
            *o += share * (v - b);
        }
    }
    let out = base.iter().zip(&offset).map(|(b, o)| b + o).collect();
    Ok(ParamVector::new(out, first.spec_fingerprint()))
}

/// Adds i.i.d. `Normal(0, sigma^2)` noise to every parameter.
pub fn inject_gaussian_noise<R: Rng>(params: &ParamVector, sigma: f64, rng: &mut R) -> ParamVector {
    assert!(sigma >= 0.0, "noise sigma must be non-negative");
    let mut out = params.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in out.values_mut() {
            *v += normal.sample(rng);
        }
    }
    out
}

/// A vector of uniform values over each layer's initialization range,
/// standing in for the upload of a malfunctioning client.
pub fn uniform_in_init_range<R: Rng>(network: &Network, fingerprint: u64, rng: &mut R) -> ParamVector {
    let mut v = vec![0.0; network.param_count()];
    for (range, bound, _) in network.init_ranges() {
        for x in &mut v[range] {
            *x = rng.gen_range(-bound..=bound);
        }
    }
    ParamVector::new(v, fingerprint)
}

/// Coordinatewise median of equally long vectors; an even count averages the
/// two middle values.
pub fn coordinatewise_median(outputs: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = outputs.first() else {
        return Vec::new();
    };
    let mut column = Vec::with_capacity(outputs.len());
    (0..first.len())
        .map(|j| {
            column.clear();
            column.extend(outputs.iter().map(|o| o[j]));
            column.sort_by(f64::total_cmp);
            let n = column.len();
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        })
        .collect()
}
