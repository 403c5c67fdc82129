//! Fingerprint data: loading UJIIndoorLoc files, RSS normalization, label
//! encoding, train/test splitting, client partitioning and a synthetic
//! generator for runs without the external dataset.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Number of access points in a fingerprint.
pub const NUM_APS: usize = 520;
/// Raw value used by UJIIndoorLoc for "access point not detected".
pub const NOT_DETECTED: f64 = 100.0;
/// Weakest representable signal; maps to 0 after normalization.
pub const RSS_FLOOR_DBM: f64 = -104.0;
pub const MAX_BUILDINGS: usize = 3;
pub const MAX_FLOORS: usize = 5;
/// Width of the building/floor one-hot code.
pub const LABEL_BITS: usize = MAX_BUILDINGS + MAX_FLOORS;
/// Assumed storey height used to turn floor indices into heights.
pub const FLOOR_HEIGHT_M: f64 = 6.0;

const UJI_COLUMNS: usize = 529;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, record {record}: {reason}")]
    Malformed {
        path: String,
        record: usize,
        reason: String,
    },
    #[error("building {building} / floor {floor} outside the 3 x 5 label space")]
    LabelOutOfRange { building: i64, floor: i64 },
    #[error("no samples")]
    NoSamples,
    #[error("dataset of {have} samples too small: {reason}")]
    TooSmall { have: usize, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintSample {
    /// Position of the sample in its source (file row or generation order).
    pub index: usize,
    /// Normalized signal strengths, one per access point, each in `[0, 1]`.
    pub rss: Vec<f64>,
    pub building_id: u8,
    pub floor_id: u8,
    /// UTM northing in meters.
    pub latitude: f64,
    /// UTM easting in meters.
    pub longitude: f64,
}

impl FingerprintSample {
    pub fn label_bits(&self) -> [f64; LABEL_BITS] {
        encode_building_floor(self.building_id, self.floor_id)
            .expect("sample labels are validated on construction")
    }
}

/// Axis-aligned coordinate box in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl CoordBounds {
    pub fn of<'a>(samples: impl IntoIterator<Item = &'a FingerprintSample>) -> Option<Self> {
        let mut it = samples.into_iter();
        let first = it.next()?;
        let mut b = CoordBounds {
            lat_min: first.latitude,
            lat_max: first.latitude,
            lon_min: first.longitude,
            lon_max: first.longitude,
        };
        for s in it {
            b.lat_min = b.lat_min.min(s.latitude);
            b.lat_max = b.lat_max.max(s.latitude);
            b.lon_min = b.lon_min.min(s.longitude);
            b.lon_max = b.lon_max.max(s.longitude);
        }
        Some(b)
    }

    fn lat_span(&self) -> f64 {
        (self.lat_max - self.lat_min).max(f64::EPSILON)
    }

    fn lon_span(&self) -> f64 {
        (self.lon_max - self.lon_min).max(f64::EPSILON)
    }

    /// Map meters to the unit square (lat, lon).
    pub fn normalize(&self, latitude: f64, longitude: f64) -> [f64; 2] {
        [
            (latitude - self.lat_min) / self.lat_span(),
            (longitude - self.lon_min) / self.lon_span(),
        ]
    }

    /// Inverse of [`CoordBounds::normalize`].
    pub fn denormalize(&self, unit: [f64; 2]) -> (f64, f64) {
        (
            self.lat_min + unit[0] * self.lat_span(),
            self.lon_min + unit[1] * self.lon_span(),
        )
    }

    pub fn diagonal(&self) -> f64 {
        (self.lat_max - self.lat_min).hypot(self.lon_max - self.lon_min)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        (
            rng.gen_range(self.lat_min..=self.lat_max),
            rng.gen_range(self.lon_min..=self.lon_max),
        )
    }
}

/// An ordered collection of samples with the bounds of their coordinates.
///
/// An empty dataset carries all-zero bounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<FingerprintSample>,
    coord_bounds: CoordBounds,
}

impl Dataset {
    pub fn new(samples: Vec<FingerprintSample>) -> Self {
        let coord_bounds = CoordBounds::of(&samples).unwrap_or_default();
        Dataset {
            samples,
            coord_bounds,
        }
    }

    pub fn samples(&self) -> &[FingerprintSample] {
        &self.samples
    }

    pub fn coord_bounds(&self) -> CoordBounds {
        self.coord_bounds
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.index)
    }

    /// Concatenate datasets, keeping the order of the inputs.
    pub fn concat(parts: impl IntoIterator<Item = Dataset>) -> Dataset {
        Dataset::new(parts.into_iter().flat_map(|d| d.samples).collect())
    }

    /// Distinct (building, floor) pairs present, sorted.
    pub fn label_set(&self) -> Vec<(u8, u8)> {
        self.samples
            .iter()
            .map(|s| (s.building_id, s.floor_id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn subset(&self, positions: &[usize]) -> Dataset {
        Dataset::new(positions.iter().map(|&p| self.samples[p].clone()).collect())
    }
}

/// One device's private data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: u32,
    pub train: Dataset,
    pub test: Dataset,
}

/// Map raw readings (dBm, or [`NOT_DETECTED`]) to `[0, 1]`.
pub fn normalize_rss(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&v| normalize_reading(v)).collect()
}

pub fn normalize_reading(v: f64) -> f64 {
    if v == NOT_DETECTED {
        0.0
    } else {
        ((v - RSS_FLOOR_DBM) / -RSS_FLOOR_DBM).clamp(0.0, 1.0)
    }
}

/// Bits 0..3 one-hot on the building, bits 3..8 one-hot on the floor.
pub fn encode_building_floor(building_id: u8, floor_id: u8) -> Result<[f64; LABEL_BITS]> {
    if building_id as usize >= MAX_BUILDINGS || floor_id as usize >= MAX_FLOORS {
        return Err(DatasetError::LabelOutOfRange {
            building: building_id.into(),
            floor: floor_id.into(),
        });
    }
    let mut bits = [0.0; LABEL_BITS];
    bits[building_id as usize] = 1.0;
    bits[MAX_BUILDINGS + floor_id as usize] = 1.0;
    Ok(bits)
}

/// Argmax over the building bits and over the floor bits; ties go to the lowest index.
pub fn decode_building_floor(bits: &[f64]) -> (u8, u8) {
    assert_eq!(bits.len(), LABEL_BITS, "label code has 8 positions");
    (
        argmax(&bits[..MAX_BUILDINGS]) as u8,
        argmax(&bits[MAX_BUILDINGS..]) as u8,
    )
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_label(building: i64, floor: i64) -> Result<(u8, u8)> {
    if !(0..MAX_BUILDINGS as i64).contains(&building) || !(0..MAX_FLOORS as i64).contains(&floor) {
        return Err(DatasetError::LabelOutOfRange { building, floor });
    }
    Ok((building as u8, floor as u8))
}

/// Load one UJIIndoorLoc CSV (header row plus 529 columns per record).
pub fn load_ujiindoorloc(path: impl AsRef<Path>) -> Result<Dataset> {
    load_ujiindoorloc_offset(path.as_ref(), 0)
}

/// Load several UJIIndoorLoc files as one dataset; sample indices continue
/// across files so they stay unique.
pub fn load_ujiindoorloc_files<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut parts = Vec::with_capacity(paths.len());
    let mut offset = 0;
    for p in paths {
        let d = load_ujiindoorloc_offset(p.as_ref(), offset)?;
        offset += d.len();
        parts.push(d);
    }
    Ok(Dataset::concat(parts))
}

fn load_ujiindoorloc_offset(path: &Path, offset: usize) -> Result<Dataset> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let malformed = |record: usize, reason: String| DatasetError::Malformed {
        path: shown.clone(),
        record,
        reason,
    };
    let mut samples = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| malformed(row + 1, e.to_string()))?;
        if rec.len() != UJI_COLUMNS {
            return Err(malformed(
                row + 1,
                format!("expected {UJI_COLUMNS} columns, found {}", rec.len()),
            ));
        }
        let num = |col: usize| -> Result<f64> {
            rec[col]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(row + 1, format!("column {}: not a number: {:?}", col + 1, &rec[col])))
        };
        let mut raw = Vec::with_capacity(NUM_APS);
        for col in 0..NUM_APS {
            let v = num(col)?;
            if v != NOT_DETECTED && !(-150.0..=0.0).contains(&v) {
                return Err(malformed(row + 1, format!("column {}: RSS {v} dBm out of range", col + 1)));
            }
            raw.push(v);
        }
        let longitude = num(520)?;
        let latitude = num(521)?;
        let floor = num(522)?;
        let building = num(523)?;
        let (building_id, floor_id) = check_label(building as i64, floor as i64)?;
        samples.push(FingerprintSample {
            index: offset + row,
            rss: normalize_rss(&raw),
            building_id,
            floor_id,
            latitude,
            longitude,
        });
    }
    if samples.is_empty() {
        return Err(DatasetError::NoSamples);
    }
    Ok(Dataset::new(samples))
}

/// Uniform random split without replacement; `|test| = round(test_fraction * |d|)`.
/// Both sides keep the source order of their samples.
pub fn split_train_test(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidParameter(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = d.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(DatasetError::TooSmall {
            have: n,
            reason: format!("a {test_fraction} split leaves one side empty"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", &[]));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((d.subset(&train), d.subset(&test)))
}

/// IID partition into `num_clients` shards whose sizes differ by at most one
/// (the first `n % num_clients` shards get the extra sample). Each shard then
/// sets aside `round(local_test_fraction * size)` samples as its private test set.
pub fn partition_clients(
    train: &Dataset,
    num_clients: usize,
    local_test_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(DatasetError::InvalidParameter("num_clients must be at least 1".into()));
    }
    if !(local_test_fraction > 0.0 && local_test_fraction < 1.0) {
        return Err(DatasetError::InvalidParameter(format!(
            "local test fraction {local_test_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = train.len();
    let base = n / num_clients;
    let extra = n % num_clients;
    let smallest = base;
    let smallest_test = (local_test_fraction * smallest as f64).round() as usize;
    if smallest_test == 0 || smallest_test >= smallest {
        return Err(DatasetError::TooSmall {
            have: n,
            reason: format!("{num_clients} clients leave a shard without train or test samples"),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "partition", &[]));
    let mut shards = Vec::with_capacity(num_clients);
    let mut start = 0;
    for client in 0..num_clients {
        let size = base + usize::from(client < extra);
        let mut part = order[start..start + size].to_vec();
        start += size;
        part.shuffle(&mut rng::stream(seed, "local-split", &[client as u64]));
        let n_test = (local_test_fraction * size as f64).round() as usize;
        let mut test = part[..n_test].to_vec();
        let mut tr = part[n_test..].to_vec();
        test.sort_unstable();
        tr.sort_unstable();
        shards.push(ClientShard {
            client_id: client as u32,
            train: train.subset(&tr),
            test: train.subset(&test),
        });
    }
    Ok(shards)
}

/// Parameters of the synthetic multi-building environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_buildings: usize,
    pub num_floors: usize,
    pub num_aps: usize,
    /// Half-width of the uniform measurement noise, in dB.
    pub noise_db: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_samples: 3000,
            num_buildings: 3,
            num_floors: 5,
            num_aps: 120,
            noise_db: 2.0,
            seed: 1,
        }
    }
}

/// Geometry of the synthetic environment: buildings in a row along the
/// easting axis, access points spread over every (building, floor) cell.
#[derive(Clone, Debug)]
pub struct SyntheticArena {
    pub num_buildings: usize,
    pub num_floors: usize,
    /// Access point positions (x, y, z) in meters.
    pub aps: Vec<[f64; 3]>,
    noise_db: f64,
}

const BUILDING_WIDTH_M: f64 = 60.0;
const BUILDING_DEPTH_M: f64 = 40.0;
const BUILDING_GAP_M: f64 = 40.0;
const ORIGIN_LON: f64 = -7700.0;
const ORIGIN_LAT: f64 = 4_864_750.0;
const TX_POWER_DBM: f64 = -35.0;
const PATH_LOSS_EXPONENT: f64 = 4.0;
const DEVICE_HEIGHT_M: f64 = 1.2;
const AP_HEIGHT_M: f64 = 2.8;
/// Readings weaker than this are reported as not detected.
const DETECTION_DBM: f64 = -100.0;

impl SyntheticArena {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.num_buildings == 0 || cfg.num_buildings > MAX_BUILDINGS {
            return Err(DatasetError::InvalidParameter(format!(
                "num_buildings {} must be in 1..={MAX_BUILDINGS}",
                cfg.num_buildings
            )));
        }
        if cfg.num_floors == 0 || cfg.num_floors > MAX_FLOORS {
            return Err(DatasetError::InvalidParameter(format!(
                "num_floors {} must be in 1..={MAX_FLOORS}",
                cfg.num_floors
            )));
        }
        if cfg.num_aps == 0 || cfg.num_aps > NUM_APS {
            return Err(DatasetError::InvalidParameter(format!(
                "num_aps {} must be in 1..={NUM_APS}",
                cfg.num_aps
            )));
        }
        if !(cfg.noise_db >= 0.0) {
            return Err(DatasetError::InvalidParameter("noise_db must be non-negative".into()));
        }
        let mut rng = rng::stream(cfg.seed, "arena", &[]);
        let cells = cfg.num_buildings * cfg.num_floors;
        let aps = (0..cfg.num_aps)
            .map(|i| {
                let cell = i % cells;
                let (b, f) = (cell / cfg.num_floors, cell % cfg.num_floors);
                let (x, y) = Self::random_point_in(b, &mut rng);
                [x, y, f as f64 * FLOOR_HEIGHT_M + AP_HEIGHT_M]
            })
            .collect();
        Ok(SyntheticArena {
            num_buildings: cfg.num_buildings,
            num_floors: cfg.num_floors,
            aps,
            noise_db: cfg.noise_db,
        })
    }

    fn random_point_in<R: Rng>(building: usize, rng: &mut R) -> (f64, f64) {
        let x0 = building as f64 * (BUILDING_WIDTH_M + BUILDING_GAP_M);
        (
            x0 + rng.gen_range(0.0..BUILDING_WIDTH_M),
            rng.gen_range(0.0..BUILDING_DEPTH_M),
        )
    }

    /// Noise-free received power (dBm) from every access point at `(x, y, z)`.
    pub fn mean_rss_dbm(&self, pos: [f64; 3]) -> Vec<f64> {
        self.aps
            .iter()
            .map(|ap| {
                let d = ((ap[0] - pos[0]).powi(2) + (ap[1] - pos[1]).powi(2) + (ap[2] - pos[2]).powi(2))
                    .sqrt()
                    .max(1.0);
                TX_POWER_DBM - 10.0 * PATH_LOSS_EXPONENT * d.log10()
            })
            .collect()
    }

    /// Raw fingerprint (dBm or [`NOT_DETECTED`]) padded to [`NUM_APS`] entries.
    pub fn measure<R: Rng>(&self, pos: [f64; 3], rng: &mut R) -> Vec<f64> {
        let mut raw: Vec<f64> = self
            .mean_rss_dbm(pos)
            .into_iter()
            .map(|m| {
                let noisy = if self.noise_db > 0.0 {
                    m + rng.gen_range(-self.noise_db..=self.noise_db)
                } else {
                    m
                };
                if noisy < DETECTION_DBM {
                    NOT_DETECTED
                } else {
                    noisy
                }
            })
            .collect();
        raw.resize(NUM_APS, NOT_DETECTED);
        raw
    }

    pub fn floor_of_height(z: f64) -> u8 {
        (z / FLOOR_HEIGHT_M).floor() as u8
    }
}

/// Generate a labeled synthetic dataset (deterministic per seed).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    let arena = SyntheticArena::new(cfg)?;
    let mut rng = rng::stream(cfg.seed, "synthetic-samples", &[]);
    let samples = (0..cfg.num_samples)
        .map(|index| {
            let building = rng.gen_range(0..cfg.num_buildings);
            let floor = rng.gen_range(0..cfg.num_floors);
            let (x, y) = SyntheticArena::random_point_in(building, &mut rng);
            let z = floor as f64 * FLOOR_HEIGHT_M + DEVICE_HEIGHT_M;
            let raw = arena.measure([x, y, z], &mut rng);
            FingerprintSample {
                index,
                rss: normalize_rss(&raw),
                building_id: building as u8,
                floor_id: floor as u8,
                latitude: ORIGIN_LAT + y,
                longitude: ORIGIN_LON + x,
            }
        })
        .collect();
    Ok(Dataset::new(samples))
}
