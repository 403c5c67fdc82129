//! Property tests for data handling and aggregation invariants.

use std::collections::BTreeSet;

use dfloc::dataset::{
    decode_building_floor, encode_building_floor, normalize_reading, partition_clients, split_train_test,
    CoordBounds, Dataset, FingerprintSample, FLOOR_HEIGHT_M, NOT_DETECTED,
};
use dfloc::model::{coordinatewise_median, error_3d, fedavg, ParamVector};
use proptest::prelude::*;

fn dataset(n: usize) -> Dataset {
    Dataset::new(
        (0..n)
            .map(|i| FingerprintSample {
                index: i,
                rss: vec![i as f64],
                building_id: (i % 3) as u8,
                floor_id: (i % 5) as u8,
                latitude: i as f64,
                longitude: -(i as f64),
            })
            .collect(),
    )
}

fn ids(d: &Dataset) -> Vec<usize> {
    d.samples().iter().map(|s| s.index).collect()
}

proptest! {
    #[test]
    fn split_is_a_disjoint_cover(n in 10usize..400, frac in 0.05f64..0.6, seed: u64) {
        let d = dataset(n);
        let (train, test) = split_train_test(&d, frac, seed).unwrap();
        prop_assert_eq!(test.len(), (frac * n as f64).round() as usize);
        let mut all: Vec<usize> = ids(&train);
        all.extend(ids(&test));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_balanced_and_covers_train(n in 100usize..600, clients in 1usize..21, seed: u64) {
        let d = dataset(n);
        let shards = partition_clients(&d, clients, 0.2, seed).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let sizes: Vec<usize> = shards.iter().map(|s| s.train.len() + s.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = BTreeSet::new();
        for (i, s) in shards.iter().enumerate() {
            prop_assert_eq!(s.client_id as usize, i);
            let size = s.train.len() + s.test.len();
            prop_assert_eq!(s.test.len(), (0.2 * size as f64).round() as usize);
            for id in ids(&s.train).into_iter().chain(ids(&s.test)) {
                prop_assert!(seen.insert(id));
            }
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn readings_normalize_into_unit_interval(a in -120.0f64..10.0, b in -120.0f64..10.0) {
        let (x, y) = (normalize_reading(a), normalize_reading(b));
        prop_assert!((0.0..=1.0).contains(&x));
        if a <= b {
            prop_assert!(x <= y);
        }
        prop_assert_eq!(normalize_reading(NOT_DETECTED), 0.0);
    }

    #[test]
    fn label_codes_round_trip(b in 0u8..3, f in 0u8..5) {
        let bits = encode_building_floor(b, f).unwrap();
        prop_assert_eq!(bits.iter().sum::<f64>(), 2.0);
        prop_assert_eq!(decode_building_floor(&bits), (b, f));
    }

    #[test]
    fn decoding_ignores_monotone_transforms(probs in prop::array::uniform8(0.0f64..1.0), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let t: Vec<f64> = probs.iter().map(|p| (scale * p + shift).exp()).collect();
        prop_assert_eq!(decode_building_floor(&probs), decode_building_floor(&t));
    }

    #[test]
    fn coordinates_round_trip(lat in 0.0f64..1.0, lon in 0.0f64..1.0, w in 1.0f64..500.0, h in 1.0f64..500.0) {
        let b = CoordBounds { lat_min: 4.8e6, lat_max: 4.8e6 + h, lon_min: -7600.0, lon_max: -7600.0 + w };
        let (m_lat, m_lon) = b.denormalize([lat, lon]);
        let u = b.normalize(m_lat, m_lon);
        prop_assert!((u[0] - lat).abs() < 1e-6 && (u[1] - lon).abs() < 1e-6);
    }

    #[test]
    fn error_3d_is_the_pythagorean_sum(dlat in -50.0f64..50.0, dlon in -50.0f64..50.0, pf in 0u8..5, tf in 0u8..5) {
        let label = FingerprintSample { index: 0, rss: vec![], building_id: 0, floor_id: tf, latitude: 10.0, longitude: 20.0 };
        let pred = (10.0 + dlat, 20.0 + dlon);
        let e3 = error_3d((0, pf), pred, &label);
        let e2 = (pred.0 - 10.0).hypot(pred.1 - 20.0);
        let dh = FLOOR_HEIGHT_M * (f64::from(pf) - f64::from(tf));
        prop_assert!((e3 - (e2 * e2 + dh * dh).sqrt()).abs() <= 1e-12 * e3.max(1.0));
        prop_assert!(e3 >= e2);
    }

    #[test]
    fn fedavg_of_copies_is_the_copy(v in prop::collection::vec(-10.0f64..10.0, 1..40), weights in prop::collection::vec(0.5f64..100.0, 1..8)) {
        let p = ParamVector::new(v, 7);
        let ups: Vec<(&ParamVector, f64)> = weights.iter().map(|&w| (&p, w)).collect();
        let avg = fedavg(&ups).unwrap();
        for (a, b) in avg.values().iter().zip(p.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fedavg_ignores_argument_order(
        vs in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 6), 1.0f64..50.0), 1..8),
        rot in 0usize..8,
    ) {
        let ps: Vec<(ParamVector, f64)> = vs.into_iter().map(|(v, w)| (ParamVector::new(v, 3), w)).collect();
        let fwd: Vec<(&ParamVector, f64)> = ps.iter().map(|(p, w)| (p, *w)).collect();
        let mut shuffled = fwd.clone();
        shuffled.reverse();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(fedavg(&fwd).unwrap(), fedavg(&shuffled).unwrap());
    }

    #[test]
    fn median_ignores_a_minority_of_outliers(
        honest in prop::collection::vec(-1.0f64..1.0, 2),
        n in 1usize..25,
        junk in prop::collection::vec(prop::collection::vec(-1e9f64..1e9, 2), 12),
    ) {
        let k = ((n - 1) / 2).min(junk.len());
        let mut outputs: Vec<Vec<f64>> = junk[..k].to_vec();
        outputs.extend(std::iter::repeat_n(honest.clone(), n - k));
        prop_assert_eq!(coordinatewise_median(&outputs), honest);
    }
}
