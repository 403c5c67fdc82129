use rand::seq::SliceRandom;
use rand::Rng;

use super::{Adam, Hyperparams, ModelError, ModelKind, ParamVector, Prediction, Result, Task};
use crate::dataset::{Dataset, FingerprintSample, FLOOR_HEIGHT_M};

/// Mini-batch Adam from `params` over `data` for `hyper.local_epochs` epochs,
/// reshuffling every epoch. Optimizer state is fresh on every call.
pub fn train_local<R: Rng>(
    params: &ParamVector,
    data: &Dataset,
    hyper: &Hyperparams,
    task: &Task,
    rng: &mut R,
) -> Result<ParamVector> {
    task.check(params)?;
    hyper.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyTestSet);
    }
    let mut values = params.values().to_vec();
    let mut adam = Adam::new(values.len(), hyper);
    let mut grad = vec![0.0; values.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let samples = data.samples();
    for _ in 0..hyper.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&FingerprintSample> = chunk.iter().map(|&i| &samples[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            task.accumulate_gradient(&values, &batch, &mut grad);
            adam.step(&mut values, &grad);
        }
    }
    Ok(ParamVector::new(values, params.spec_fingerprint()))
}

/// Fraction of samples whose decoded building and floor both match.
pub fn evaluate_bfc(params: &ParamVector, test: &Dataset, task: &Task) -> Result<f64> {
    if task.kind() != ModelKind::Bfc {
        return Err(ModelError::Mismatch("evaluate_bfc needs a BFC task".into()));
    }
    if test.is_empty() {
        return Err(ModelError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for s in test.samples() {
        if let Prediction::Bfc { building, floor } = task.predict(params, &s.rss)? {
            if building == s.building_id && floor == s.floor_id {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean 2D Euclidean error in meters after denormalizing with the task bounds.
pub fn evaluate_llr(params: &ParamVector, test: &Dataset, task: &Task) -> Result<f64> {
    if task.kind() != ModelKind::Llr {
        return Err(ModelError::Mismatch("evaluate_llr needs an LLR task".into()));
    }
    if test.is_empty() {
        return Err(ModelError::EmptyTestSet);
    }
    let mut total = 0.0;
    for s in test.samples() {
        if let Prediction::Llr {
            latitude,
            longitude,
        } = task.predict(params, &s.rss)?
        {
            total += (latitude - s.latitude).hypot(longitude - s.longitude);
        }
    }
    Ok(total / test.len() as f64)
}

/// 3D error with heights of 6 m per floor. The predicted building only matters
/// through the coordinates.
pub fn error_3d(bfc_pred: (u8, u8), llr_pred_m: (f64, f64), label: &FingerprintSample) -> f64 {
    let d_plane = (llr_pred_m.0 - label.latitude).hypot(llr_pred_m.1 - label.longitude);
    let d_h = FLOOR_HEIGHT_M * (f64::from(bfc_pred.1) - f64::from(label.floor_id));
    // Nested hypot keeps the result >= the planar error bit for bit, which a
    // single sqrt of the three squares does not when d_h is 0.
    d_plane.hypot(d_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig, NUM_APS};
    use crate::model::{ModelSpec, ParamVector};
    use crate::rng;

    fn sample(lat: f64, lon: f64, b: u8, f: u8) -> FingerprintSample {
        FingerprintSample {
            index: 0,
            rss: vec![0.0; NUM_APS],
            building_id: b,
            floor_id: f,
            latitude: lat,
            longitude: lon,
        }
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            num_samples: n,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn error_3d_examples() {
        let label = sample(10.0, 20.0, 1, 2);
        assert_eq!(error_3d((1, 2), (10.0, 20.0), &label), 0.0);
        assert_eq!(error_3d((1, 3), (10.0, 20.0), &label), 6.0);
        // 8 m planar error and one floor off: the 6-8-10 triangle.
        assert!((error_3d((0, 1), (10.0, 28.0), &label) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_on_empty_set_fails() {
        let task = Task::new(&ModelSpec::bfc_default(), Default::default()).unwrap();
        let p = task.init_params(&mut rng::stream(1, "i", &[]));
        assert_eq!(evaluate_bfc(&p, &Dataset::default(), &task), Err(ModelError::EmptyTestSet));
    }

    /// A BFC model whose last layer is a huge bias towards one label always
    /// predicts that label.
    fn constant_bfc(task: &Task, b: u8, f: u8) -> ParamVector {
        let mut v = vec![0.0; task.network().param_count()];
        let (range, _, _) = task.network().init_ranges().last().unwrap().clone();
        let bits = crate::dataset::encode_building_floor(b, f).unwrap();
        for (slot, bit) in v[range].iter_mut().zip(bits) {
            *slot = if bit == 1.0 { 20.0 } else { -20.0 };
        }
        ParamVector::new(v, task.fingerprint())
    }

    #[test]
    fn bfc_accuracy_needs_both_labels() {
        let task = Task::new(&ModelSpec::bfc_default(), Default::default()).unwrap();
        let p = constant_bfc(&task, 1, 3);
        let right = Dataset::new(vec![sample(0.0, 0.0, 1, 3), sample(1.0, 1.0, 1, 3)]);
        assert_eq!(evaluate_bfc(&p, &right, &task).unwrap(), 1.0);
        let wrong_building = Dataset::new(vec![sample(0.0, 0.0, 0, 3)]);
        assert_eq!(evaluate_bfc(&p, &wrong_building, &task).unwrap(), 0.0);
    }

    #[test]
    fn llr_error_examples() {
        let test = Dataset::new(vec![sample(0.0, 0.0, 0, 0), sample(10.0, 0.0, 0, 0)]);
        let bounds = crate::dataset::CoordBounds {
            lat_min: 0.0,
            lat_max: 100.0,
            lon_min: 0.0,
            lon_max: 100.0,
        };
        let task = Task::new(&ModelSpec::llr_default(), bounds).unwrap();
        let n = task.network().param_count();
        // Zero weights with output biases (0.03, 0.04) predict (3 m, 4 m) everywhere.
        let mut v = vec![0.0; n];
        v[n - 2] = 0.03;
        v[n - 1] = 0.04;
        let p = ParamVector::new(v, task.fingerprint());
        let one = Dataset::new(vec![sample(0.0, 0.0, 0, 0)]);
        assert!((evaluate_llr(&p, &one, &task).unwrap() - 5.0).abs() < 1e-9);

        // Predicting (0, 0): errors 0 m and 10 m, mean 5 m.
        let zero = ParamVector::new(vec![0.0; n], task.fingerprint());
        assert!((evaluate_llr(&zero, &test, &task).unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(evaluate_llr(&zero, &one, &task).unwrap(), 0.0);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = toy_data(60, 4);
        for spec in [ModelSpec::bfc_default(), ModelSpec::llr_default()] {
            let task = Task::new(&spec, data.coord_bounds()).unwrap();
            let p0 = task.init_params(&mut rng::stream(3, "init", &[]));
            let hyper = Hyperparams {
                batch_size: 20,
                ..Hyperparams::default_for(spec.kind)
            };
            let a = train_local(&p0, &data, &hyper, &task, &mut rng::stream(3, "t", &[])).unwrap();
            let b = train_local(&p0, &data, &hyper, &task, &mut rng::stream(3, "t", &[])).unwrap();
            assert_eq!(a, b);
            assert!(task.mean_loss(&a, &data).unwrap() < task.mean_loss(&p0, &data).unwrap());
        }
    }

    #[test]
    fn bce_decreases_on_a_fixed_batch() {
        let data = toy_data(16, 8);
        let task = Task::new(&ModelSpec::bfc_default(), data.coord_bounds()).unwrap();
        let mut p = task.init_params(&mut rng::stream(8, "init", &[]));
        let batch: Vec<&FingerprintSample> = data.samples().iter().collect();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let (loss, g) = task.loss_and_gradient(&p, &batch).unwrap();
            losses.push(loss);
            for (v, gv) in p.values_mut().iter_mut().zip(&g) {
                *v -= 0.5 * gv;
            }
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn toy_models_fit_their_training_points() {
        let data = toy_data(10, 12);
        let hyper = |kind| Hyperparams {
            batch_size: 10,
            local_epochs: 400,
            ..Hyperparams::default_for(kind)
        };

        let task = Task::new(&ModelSpec::bfc_default(), data.coord_bounds()).unwrap();
        let p0 = task.init_params(&mut rng::stream(1, "init", &[]));
        let p = train_local(&p0, &data, &hyper(ModelKind::Bfc), &task, &mut rng::stream(1, "t", &[])).unwrap();
        assert_eq!(evaluate_bfc(&p, &data, &task).unwrap(), 1.0);

        let task = Task::new(&ModelSpec::llr_default(), data.coord_bounds()).unwrap();
        let p0 = task.init_params(&mut rng::stream(1, "init", &[]));
        let p = train_local(&p0, &data, &hyper(ModelKind::Llr), &task, &mut rng::stream(1, "t", &[])).unwrap();
        for s in data.samples() {
            let out = task.raw_output(&p, &s.rss).unwrap();
            let t = task.target(s);
            assert!((out[0] - t[0]).abs() < 0.05 && (out[1] - t[1]).abs() < 0.05, "{out:?} vs {t:?}");
        }
    }

    /// Untrained models guess roughly uniformly among the 15 cells.
    #[test]
    fn random_model_accuracy_is_near_chance() {
        let data = toy_data(1500, 21);
        let task = Task::new(&ModelSpec::bfc_default(), data.coord_bounds()).unwrap();
        let mut accs = Vec::new();
        for seed in 0..8 {
            let p = task.init_params(&mut rng::stream(seed, "init", &[]));
            accs.push(evaluate_bfc(&p, &data, &task).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        // 1/15 = 0.067; a single random network can be biased towards a few
        // cells, so the check is on the average over initializations.
        assert!(mean < 0.2, "mean accuracy of random models {mean} ({accs:?})");
    }
}
