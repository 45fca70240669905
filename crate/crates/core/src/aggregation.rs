//! Server-side aggregation: per-task weighted averaging of visual adapters,
//! adaptive nearest-neighbour aggregation of text adapters, and FedAvg.
//!
//! Everything here is a pure function of the uploaded parameter values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Stage;
pub use crate::params::ParamSet;

/// One client's upload. Task and client ids are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub task_id: usize,
    pub sample_count: usize,
    pub visual_params: ParamSet,
    pub text_params: ParamSet,
    pub round: usize,
    pub stage: Stage,
}

/// How the per-client coefficients of the adaptive text aggregation are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborWeighting {
    /// Coefficients exactly as printed; they sum to less than one when `M > 1`.
    AsWritten,
    /// Coefficients divided by their sum.
    #[default]
    Renormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub client_id: usize,
    pub distance: f64,
    /// Normalised inverse-distance weight.
    pub weight: f64,
    /// Final mixing coefficient applied to this neighbour's parameters.
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAggregation {
    pub client_id: usize,
    pub neighbors: Vec<Neighbor>,
    pub own_coefficient: f64,
    /// Sum of the printed coefficients before any renormalisation.
    pub raw_coefficient_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregationReport {
    pub mode: Option<NeighborWeighting>,
    pub top_m: usize,
    /// Pairwise text-adapter distances in ascending client-id order.
    pub client_ids: Vec<usize>,
    pub distances: Vec<Vec<f64>>,
    pub clients: Vec<ClientAggregation>,
    pub task_members: BTreeMap<usize, Vec<usize>>,
}

/// Weighted average `Σ (n_k / Σ n) Θ_k`.
fn weighted_average(items: &[(&ParamSet, usize, usize)]) -> Result<ParamSet> {
    let (first, _, _) = items.first().ok_or_else(|| Error::Aggregation("nothing to average".into()))?;
    for (p, _, client) in items {
        if !first.compatible_with(p) {
            return Err(Error::Aggregation(format!("client {client} uploaded an incompatible parameter set")));
        }
    }
    let total: usize = items.iter().map(|(_, n, _)| n).sum();
    let mut acc = vec![0.0; first.num_scalars()];
    for (p, n, _) in items {
        let w = *n as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(p.flat_view()) {
            *a += w * v;
        }
    }
    first.with_flat(&acc)
}

fn check_counts(updates: &[ClientUpdate]) -> Result<()> {
    if let Some(u) = updates.iter().find(|u| u.sample_count == 0) {
        return Err(Error::Aggregation(format!("client {} reports zero samples", u.client_id)));
    }
    Ok(())
}

/// Per-task weighted average of the visual adapters. Tasks without any
/// client are absent from the result.
pub fn task_aware_aggregate(updates: &[ClientUpdate]) -> Result<BTreeMap<usize, ParamSet>> {
    check_counts(updates)?;
    let mut groups: BTreeMap<usize, Vec<(&ParamSet, usize, usize)>> = BTreeMap::new();
    for u in updates {
        groups.entry(u.task_id).or_default().push((&u.visual_params, u.sample_count, u.client_id));
    }
    groups
        .into_iter()
        .map(|(task, items)| {
            if items.len() == 1 {
                Ok((task, items[0].0.clone()))
            } else {
                Ok((task, weighted_average(&items)?))
            }
        })
        .collect()
}

/// L2 distance between flat views.
pub fn euclidean_distance(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    a.check_compatible(b)?;
    Ok(a.flat_view().iter().zip(b.flat_view()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// The `M` clients closest to `client`; ties go to the lower id. Returns
/// every other client when `M` exceeds their number.
pub fn select_neighbors(client: usize, sets: &[(usize, &ParamSet)], m: usize) -> Result<Vec<(usize, f64)>> {
    if m == 0 {
        return Err(Error::Invalid("neighbour count M must be at least 1".into()));
    }
    if sets.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 clients, got {}", sets.len())));
    }
    let own = sets
        .iter()
        .find(|(id, _)| *id == client)
        .ok_or_else(|| Error::Invalid(format!("client {client} not among the uploads")))?
        .1;
    let mut others = sets
        .iter()
        .filter(|(id, _)| *id != client)
        .map(|(id, p)| euclidean_distance(own, p).map(|d| (*id, d)))
        .collect::<Result<Vec<_>>>()?;
    others.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    others.truncate(m);
    Ok(others)
}

/// Normalised inverse-distance weights. Zero-distance neighbours, when
/// present, share the whole mass equally.
pub fn inverse_distance_weights(distances: &[f64]) -> Vec<f64> {
    let zeros = distances.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        return distances.iter().map(|&d| if d == 0.0 { 1.0 / zeros as f64 } else { 0.0 }).collect();
    }
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// Adaptive Top-M text-adapter aggregation, one output per client.
pub fn adaptive_text_aggregate(
    updates: &[ClientUpdate],
    m: usize,
    mode: NeighborWeighting,
) -> Result<(BTreeMap<usize, ParamSet>, AggregationReport)> {
    check_counts(updates)?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = &sorted.first().ok_or_else(|| Error::Aggregation("no uploads".into()))?.text_params;
    for u in &sorted {
        if !first.compatible_with(&u.text_params) {
            return Err(Error::Aggregation(format!(
                "client {} uploaded an incompatible text adapter",
                u.client_id
            )));
        }
    }
    let sets: Vec<(usize, &ParamSet)> = sorted.iter().map(|u| (u.client_id, &u.text_params)).collect();
    let by_id: BTreeMap<usize, &ClientUpdate> = sorted.iter().map(|u| (u.client_id, *u)).collect();

    let mut report = AggregationReport {
        mode: Some(mode),
        top_m: m,
        client_ids: sets.iter().map(|s| s.0).collect(),
        distances: Vec::with_capacity(sets.len()),
        ..Default::default()
    };
    for (_, a) in &sets {
        report.distances.push(sets.iter().map(|(_, b)| euclidean_distance(a, b)).collect::<Result<_>>()?);
    }
    for u in &sorted {
        report.task_members.entry(u.task_id).or_default().push(u.client_id);
    }

    let mut out = BTreeMap::new();
    for u in &sorted {
        if sets.len() == 1 {
            out.insert(u.client_id, u.text_params.clone());
            report.clients.push(ClientAggregation {
                client_id: u.client_id,
                neighbors: Vec::new(),
                own_coefficient: 1.0,
                raw_coefficient_sum: 1.0,
            });
            continue;
        }
        let chosen = select_neighbors(u.client_id, &sets, m)?;
        let dists: Vec<f64> = chosen.iter().map(|c| c.1).collect();
        let weights = inverse_distance_weights(&dists);
        let n_own = u.sample_count as f64;
        let denom = n_own + chosen.iter().map(|(id, _)| by_id[id].sample_count as f64).sum::<f64>();
        let own_raw = n_own / denom;
        let neigh_raw: Vec<f64> = chosen
            .iter()
            .zip(&weights)
            .map(|((id, _), w)| by_id[id].sample_count as f64 * w / denom)
            .collect();
        let raw_sum = own_raw + neigh_raw.iter().sum::<f64>();
        let norm = match mode {
            NeighborWeighting::AsWritten => 1.0,
            NeighborWeighting::Renormalized => raw_sum,
        };
        let own_coef = own_raw / norm;
        let mut acc: Vec<f64> = u.text_params.flat_view().iter().map(|v| own_coef * v).collect();
        let mut neighbors = Vec::with_capacity(chosen.len());
        for (((id, d), w), raw) in chosen.iter().zip(&weights).zip(&neigh_raw) {
            let coef = raw / norm;
            for (a, v) in acc.iter_mut().zip(by_id[id].text_params.flat_view()) {
                *a += coef * v;
            }
            neighbors.push(Neighbor { client_id: *id, distance: *d, weight: *w, coefficient: coef });
        }
        out.insert(u.client_id, u.text_params.with_flat(&acc)?);
        report.clients.push(ClientAggregation {
            client_id: u.client_id,
            neighbors,
            own_coefficient: own_coef,
            raw_coefficient_sum: raw_sum,
        });
    }
    Ok((out, report))
}

/// Sample-weighted average of one parameter group over every client.
pub fn fedavg_aggregate(updates: &[ClientUpdate], pick: impl Fn(&ClientUpdate) -> &ParamSet) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::Aggregation("FedAvg over an empty update list".into()));
    }
    check_counts(updates)?;
    let items: Vec<_> = updates.iter().map(|u| (pick(u), u.sample_count, u.client_id)).collect();
    if items.len() == 1 {
        return Ok(items[0].0.clone());
    }
    weighted_average(&items)
}

/// Per client, the sample-weighted average of the text adapters of clients
/// sharing its task.
pub fn same_task_text_aggregate(updates: &[ClientUpdate]) -> Result<BTreeMap<usize, ParamSet>> {
    check_counts(updates)?;
    let mut groups: BTreeMap<usize, Vec<&ClientUpdate>> = BTreeMap::new();
    for u in updates {
        groups.entry(u.task_id).or_default().push(u);
    }
    let mut out = BTreeMap::new();
    for members in groups.values() {
        let items: Vec<_> = members.iter().map(|u| (&u.text_params, u.sample_count, u.client_id)).collect();
        let avg = if items.len() == 1 { items[0].0.clone() } else { weighted_average(&items)? };
        for u in members {
            out.insert(u.client_id, avg.clone());
        }
    }
    Ok(out)
}
