//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Every entry point takes plain numbers or strings and returns a JSON string,
//! so the page needs no generated TypeScript glue beyond `wasm-bindgen --target web`.

use dfloc::dataset::{generate_synthetic, SyntheticConfig};
use dfloc::harness::{self, ExperimentConfig, KindSelection};
use dfloc::ledger::audit_dump;
use dfloc::model::ModelKind;
use dfloc::protocol::System;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Point {
    x: f64,
    y: f64,
    building: u8,
    floor: u8,
}

/// Sample positions of a synthetic arena, for the scatter plot.
pub fn dataset_points(num_samples: usize, seed: u64) -> Result<String, String> {
    let cfg = SyntheticConfig {
        num_samples,
        seed,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let points: Vec<Point> = data
        .samples()
        .iter()
        .map(|s| Point {
            x: s.longitude,
            y: s.latitude,
            building: s.building_id,
            floor: s.floor_id,
        })
        .collect();
    Ok(serde_json::to_string(&points).expect("points serialize"))
}

#[derive(Serialize)]
struct Curve {
    system: String,
    /// Accuracy (bfc) or mean error in meters (llr), per round.
    values: Vec<Option<f64>>,
    approved: Vec<Option<usize>>,
    rejected: Vec<Option<usize>>,
    final_value: Option<f64>,
    inference_value: Option<f64>,
    aborted_rounds: usize,
}

#[derive(Serialize)]
struct Comparison {
    kind: &'static str,
    curves: Vec<Curve>,
    chain: String,
}

/// Options for [`compare_systems`].
#[derive(Clone, Copy, Debug)]
pub struct DemoRun {
    pub llr: bool,
    pub num_samples: usize,
    pub rounds: u64,
    pub malicious: usize,
    pub sigma: f64,
    pub faulty: usize,
    pub seed: u64,
}

impl DemoRun {
    fn config(&self, system: System) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            system,
            kind: if self.llr { KindSelection::Llr } else { KindSelection::Bfc },
            ..ExperimentConfig::default()
        };
        c.dataset.synthetic.num_samples = self.num_samples;
        c.seeds.master = self.seed;
        c.attack.malicious_count = self.malicious;
        c.attack.sigma = self.sigma;
        c.faults.count = self.faulty;
        c.inference.trials = 3;
        for k in [ModelKind::Bfc, ModelKind::Llr] {
            c.kind_config_mut(k).rounds = Some(self.rounds);
        }
        c
    }
}

/// Train the same task with the blockchain protocol and the central server.
pub fn compare_systems(run: DemoRun) -> Result<String, String> {
    let mut curves = Vec::new();
    let mut chain = String::new();
    let kind = if run.llr { "llr" } else { "bfc" };
    for system in [System::Dfl, System::Cfl] {
        let r = harness::run_experiment(&run.config(system)).map_err(|e| e.to_string())?;
        let rounds: Vec<_> = r.rows.iter().filter(|row| row.row_type == "round").collect();
        let pick = |a: Option<f64>, e: Option<f64>| if run.llr { e } else { a };
        curves.push(Curve {
            system: system.to_string(),
            values: rounds.iter().map(|row| pick(row.accuracy, row.error_distance_m)).collect(),
            approved: rounds.iter().map(|row| row.approved_updates).collect(),
            rejected: rounds.iter().map(|row| row.rejected_updates).collect(),
            final_value: pick(r.summary.accuracy, r.summary.error_distance_m),
            inference_value: pick(r.summary.inference_accuracy, r.summary.inference_error_distance_m),
            aborted_rounds: r.summary.aborted_rounds,
        });
        if system == System::Dfl {
            chain = harness::chain_dump(std::slice::from_ref(&r));
        }
    }
    Ok(serde_json::to_string(&Comparison { kind, curves, chain }).expect("comparison serializes"))
}

#[derive(Serialize)]
struct Audit {
    ok: bool,
    message: String,
}

/// Audit a chain dump. Never fails; the verdict is in the JSON.
pub fn audit(text: &str) -> String {
    let a = match audit_dump(text) {
        Ok(report) => Audit {
            ok: true,
            message: report
                .chains
                .iter()
                .map(|(label, blocks, stake)| format!("chain {label}: {blocks} blocks, total stake {stake}"))
                .collect::<Vec<_>>()
                .join("\n"),
        },
        Err(e) => Audit {
            ok: false,
            message: e.to_string(),
        },
    };
    serde_json::to_string(&a).expect("audit serializes")
}

#[wasm_bindgen(js_name = datasetPoints)]
pub fn dataset_points_js(num_samples: usize, seed: u32) -> Result<String, JsError> {
    dataset_points(num_samples, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = compareSystems)]
pub fn compare_systems_js(
    llr: bool,
    num_samples: usize,
    rounds: u32,
    malicious: usize,
    sigma: f64,
    faulty: usize,
    seed: u32,
) -> Result<String, JsError> {
    compare_systems(DemoRun {
        llr,
        num_samples,
        rounds: u64::from(rounds),
        malicious,
        sigma,
        faulty,
        seed: u64::from(seed),
    })
    .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = auditChain)]
pub fn audit_chain_js(text: &str) -> String {
    audit(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_cover_every_building() {
        let v: Vec<serde_json::Value> = serde_json::from_str(&dataset_points(300, 2).unwrap()).unwrap();
        assert_eq!(v.len(), 300);
        let buildings: std::collections::BTreeSet<u64> = v.iter().map(|p| p["building"].as_u64().unwrap()).collect();
        assert_eq!(buildings.len(), 3);
    }

    #[test]
    fn comparison_round_trips_through_audit() {
        let run = DemoRun {
            llr: false,
            num_samples: 400,
            rounds: 2,
            malicious: 2,
            sigma: 1.0,
            faulty: 0,
            seed: 3,
        };
        let v: serde_json::Value = serde_json::from_str(&compare_systems(run).unwrap()).unwrap();
        assert_eq!(v["curves"].as_array().unwrap().len(), 2);
        assert_eq!(v["curves"][0]["values"].as_array().unwrap().len(), 2);
        let chain = v["chain"].as_str().unwrap();
        let ok: serde_json::Value = serde_json::from_str(&audit(chain)).unwrap();
        assert_eq!(ok["ok"], true);
        let tampered = chain.replacen("reward", "rewarD", 1);
        let bad: serde_json::Value = serde_json::from_str(&audit(&tampered)).unwrap();
        assert_eq!(bad["ok"], false);
    }
}
