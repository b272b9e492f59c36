//! Browser bindings: curriculum schedules, fair aggregation weights and a
//! small federated run, each returned as JSON.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use affl_core::aggregation;
use affl_core::config::{preset, Algorithm};
use affl_core::messenger::{curriculum_weights, CurriculumSchedule};
use affl_core::sim;

#[derive(Serialize)]
struct Curriculum {
    rounds: Vec<usize>,
    /// `weights[k][t]` is the weight of tier `k` in round `t`.
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Weights {
    w: Vec<f64>,
    size_only: Vec<f64>,
}

#[derive(Serialize)]
struct Round {
    round: usize,
    global_accuracy: f64,
    fairness_gap: f64,
    gini: f64,
    capacity_index: usize,
    bytes: u64,
}

#[derive(Serialize)]
struct Simulation {
    algorithm: String,
    clients: usize,
    rounds_to_target: Option<usize>,
    target: f64,
    client_accuracy: Vec<f64>,
    rounds: Vec<Round>,
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

pub fn curriculum_json(horizon: usize, tiers: usize) -> Result<String, String> {
    if horizon == 0 || tiers == 0 {
        return Err("horizon and tiers must be positive".into());
    }
    let schedule = CurriculumSchedule::spread(horizon, tiers);
    let per_round: Vec<Vec<f64>> = (0..horizon).map(|t| curriculum_weights(t as f64, &schedule)).collect();
    let weights = (0..tiers).map(|k| per_round.iter().map(|pi| pi[k]).collect()).collect();
    json(&Curriculum { rounds: (0..horizon).collect(), weights })
}

pub fn fair_weights_json(phi: &[f64], counts: &[f64], eps_smooth: f64, delta_size: f64) -> Result<String, String> {
    let fw = aggregation::fair_weights(phi, counts, eps_smooth, delta_size).map_err(|e| e.to_string())?;
    let total: f64 = counts.iter().sum();
    json(&Weights { w: fw.w, size_only: counts.iter().map(|c| c / total).collect() })
}

pub fn simulate_json(algorithm: &str, seed: u64, rounds: usize) -> Result<String, String> {
    let algo = match algorithm {
        "affl" => Algorithm::Affl,
        "static_messenger" => Algorithm::StaticMessenger,
        "fedavg" => Algorithm::Fedavg,
        "uniform_weight_affl" => Algorithm::UniformWeightAffl,
        other => return Err(format!("unknown algorithm '{other}'")),
    };
    if !(1..=30).contains(&rounds) {
        return Err("rounds must lie in 1..=30".into());
    }
    let mut cfg = preset("smoke").map_err(|e| e.to_string())?;
    cfg.seed = seed;
    cfg.max_rounds = rounds;
    cfg.protocol.algorithm = algo;
    let log = sim::run_experiment(&cfg).map_err(|e| e.to_string())?;
    let rounds = log
        .records
        .iter()
        .map(|r| Round {
            round: r.round + 1,
            global_accuracy: r.global_accuracy,
            fairness_gap: r.fairness_gap,
            gini: aggregation::gini(&r.client_accuracy).unwrap_or(0.0),
            capacity_index: r.capacity_index,
            bytes: r.bytes_up + r.bytes_down,
        })
        .collect();
    json(&Simulation {
        algorithm: algo.name().to_string(),
        clients: log.client_classes.len(),
        rounds_to_target: log.rounds_to_target(),
        target: log.target_accuracy,
        client_accuracy: log.final_client_accuracy().to_vec(),
        rounds,
    })
}

#[wasm_bindgen]
pub fn curriculum(horizon: usize, tiers: usize) -> Result<String, JsError> {
    curriculum_json(horizon, tiers).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fairWeights)]
pub fn fair_weights(phi: Vec<f64>, counts: Vec<f64>, eps_smooth: f64, delta_size: f64) -> Result<String, JsError> {
    fair_weights_json(&phi, &counts, eps_smooth, delta_size).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn simulate(algorithm: &str, seed: u32, rounds: usize) -> Result<String, JsError> {
    simulate_json(algorithm, seed as u64, rounds).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_columns_sum_to_one() {
        let v: serde_json::Value = serde_json::from_str(&curriculum_json(20, 3).unwrap()).unwrap();
        let w = v["weights"].as_array().unwrap();
        assert_eq!(w.len(), 3);
        for t in 0..20 {
            let s: f64 = w.iter().map(|row| row[t].as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(curriculum_json(0, 3).is_err());
    }

    #[test]
    fn fair_weights_example() {
        let v: serde_json::Value = serde_json::from_str(&fair_weights_json(&[1.0, 3.0], &[1.0, 1.0], 0.0, 0.0).unwrap()).unwrap();
        assert!((v["w"][1].as_f64().unwrap() - 0.75).abs() < 1e-12);
        assert!(fair_weights_json(&[1.0], &[1.0, 2.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn simulation_reports_each_round() {
        let v: serde_json::Value = serde_json::from_str(&simulate_json("affl", 1, 2).unwrap()).unwrap();
        assert_eq!(v["rounds"].as_array().unwrap().len(), 2);
        assert_eq!(v["algorithm"], "affl");
        assert!(simulate_json("sgd", 1, 2).is_err());
        assert!(simulate_json("affl", 1, 0).is_err());
    }
}
