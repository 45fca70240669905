//! Browser bindings: router losses, text-adapter mixing weights and a small
//! federation run, each returning JSON for the demo page.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use pilot_core::aggregation::{adaptive_text_aggregate, ClientUpdate, NeighborWeighting};
use pilot_core::config::{FederationConfig, Strategy};
use pilot_core::losses::{dispatch_fractions, load_balance_loss, router_z_loss, Stage};
use pilot_core::protocol::run_federation;
use pilot_core::{ParamSet, Tensor};

fn js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// `logits` is a row-major `tokens × adapters` score matrix.
pub fn router_summary_json(logits: &[f64], tokens: usize) -> Result<Value, String> {
    if tokens == 0 || logits.is_empty() || logits.len() % tokens != 0 {
        return Err(format!("{} scores do not split into {tokens} tokens", logits.len()));
    }
    let t = logits.len() / tokens;
    if t < 2 {
        return Err("at least two adapters are needed".into());
    }
    let g = Tensor::new(vec![tokens, t], logits.to_vec()).map_err(|e| e.to_string())?;
    let per_token = g.softmax(1).map_err(|e| e.to_string())?;
    let pooled: Vec<f64> = (0..t).map(|j| (0..tokens).map(|i| g.row(i)[j]).sum::<f64>() / tokens as f64).collect();
    let p = Tensor::vector(pooled).softmax(0).map_err(|e| e.to_string())?;
    let balance = load_balance_loss(&per_token).map_err(|e| e.to_string())?;
    let zloss = router_z_loss(&g).map_err(|e| e.to_string())?;
    Ok(json!({
        "p": p.data(),
        "per_token": (0..tokens).map(|i| per_token.row(i).to_vec()).collect::<Vec<_>>(),
        "dispatch": dispatch_fractions(&per_token),
        "balance": balance,
        "zloss": zloss,
    }))
}

#[wasm_bindgen]
pub fn router_summary(logits: &[f64], tokens: usize) -> Result<String, JsError> {
    js(router_summary_json(logits, tokens))
}

/// Clients are points in a `dim`-dimensional text-adapter space.
pub fn text_weights_json(
    points: &[f64],
    dim: usize,
    tasks: &[u32],
    sizes: &[u32],
    top_m: usize,
    as_written: bool,
) -> Result<Value, String> {
    let k = tasks.len();
    if dim == 0 || points.len() != k * dim || sizes.len() != k {
        return Err(format!("{} coordinates, {} sizes for {k} clients in {dim} dims", points.len(), sizes.len()));
    }
    let updates: Vec<ClientUpdate> = (0..k)
        .map(|i| {
            let mut text = ParamSet::new();
            text.insert("a", Tensor::vector(points[i * dim..(i + 1) * dim].to_vec()));
            ClientUpdate {
                client_id: i,
                task_id: tasks[i] as usize,
                sample_count: sizes[i] as usize,
                visual_params: ParamSet::new(),
                text_params: text,
                round: 1,
                stage: Stage::One,
            }
        })
        .collect();
    let mode = if as_written { NeighborWeighting::AsWritten } else { NeighborWeighting::Renormalized };
    let (out, report) = adaptive_text_aggregate(&updates, top_m, mode).map_err(|e| e.to_string())?;
    let clients: Vec<Value> = report
        .clients
        .iter()
        .map(|c| {
            json!({
                "client": c.client_id,
                "own": c.own_coefficient,
                "raw_sum": c.raw_coefficient_sum,
                "neighbors": c.neighbors.iter().map(|n| json!({
                    "client": n.client_id,
                    "distance": n.distance,
                    "weight": n.weight,
                    "coefficient": n.coefficient,
                })).collect::<Vec<_>>(),
                "result": out[&c.client_id].get("a").map(|t| t.data().to_vec()),
            })
        })
        .collect();
    Ok(json!({ "clients": clients }))
}

#[wasm_bindgen]
pub fn text_weights(
    points: &[f64],
    dim: usize,
    tasks: &[u32],
    sizes: &[u32],
    top_m: usize,
    as_written: bool,
) -> Result<String, JsError> {
    js(text_weights_json(points, dim, tasks, sizes, top_m, as_written))
}

/// A reduced federation (100 samples per client) small enough for a page.
pub fn simulate_json(seed: u32, strategy: &str, heterogeneity: f64, rounds: usize) -> Result<Value, String> {
    let mut cfg = FederationConfig::scenario();
    cfg.seed = seed as u64;
    cfg.strategy = Strategy::parse(strategy).map_err(|e| e.to_string())?;
    cfg.heterogeneity = heterogeneity;
    cfg.rounds = rounds;
    cfg.samples_per_client = 100;
    cfg.parallel = false;
    cfg.write_checkpoints = false;
    let run = run_federation(&cfg).map_err(|e| e.to_string())?;
    let h = &run.history;
    Ok(json!({
        "run_id": h.run_id,
        "stages": h.stage_tags(),
        "round_accuracy": h.rounds.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>(),
        "clients": h.final_accuracies().iter().map(|(k, t, a)| json!({"client": k, "task": t, "accuracy": a})).collect::<Vec<_>>(),
        "bytes_up": h.total_bytes_up(),
    }))
}

#[wasm_bindgen]
pub fn simulate(seed: u32, strategy: &str, heterogeneity: f64, rounds: usize) -> Result<String, JsError> {
    js(simulate_json(seed, strategy, heterogeneity, rounds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_router_scores() {
        let v = router_summary_json(&[0.0; 6], 2).unwrap();
        assert!((v["balance"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert!((v["zloss"].as_f64().unwrap() - 3f64.ln().powi(2)).abs() < 1e-10);
        let p: Vec<f64> = v["p"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn router_rejects_ragged_input() {
        assert!(router_summary_json(&[0.0; 5], 2).is_err());
        assert!(router_summary_json(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn text_weights_are_convex_by_default() {
        let pts = [0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 3.0, 3.0];
        let v = text_weights_json(&pts, 2, &[0, 0, 1, 1], &[10, 10, 10, 10], 2, false).unwrap();
        for c in v["clients"].as_array().unwrap() {
            let total = c["own"].as_f64().unwrap()
                + c["neighbors"].as_array().unwrap().iter().map(|n| n["coefficient"].as_f64().unwrap()).sum::<f64>();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let w = text_weights_json(&pts, 2, &[0, 0, 1, 1], &[10, 10, 10, 10], 2, true).unwrap();
        assert!(w["clients"][0]["raw_sum"].as_f64().unwrap() < 1.0);
    }

    #[test]
    fn small_run_reports_every_round() {
        let v = simulate_json(3, "pilot", 0.7, 3).unwrap();
        assert_eq!(v["stages"], json!([1, 2, 2]));
        assert_eq!(v["round_accuracy"].as_array().unwrap().len(), 3);
        assert_eq!(v["clients"].as_array().unwrap().len(), 9);
        assert!(simulate_json(3, "nope", 0.7, 3).is_err());
    }
}
