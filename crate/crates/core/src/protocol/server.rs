//! Server side: one aggregation barrier per round.

use std::collections::{BTreeMap, BTreeSet};

use crate::aggregation::{
    adaptive_text_aggregate, fedavg_aggregate, same_task_text_aggregate, task_aware_aggregate, AggregationReport,
    ClientUpdate, NeighborWeighting,
};
use crate::config::{FederationConfig, Strategy, TextAgg};
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::params::ParamSet;

use super::messages::Broadcast;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerSettings {
    /// Per-task visual aggregation; false averages every client into one adapter.
    pub task_aware: bool,
    pub text_agg: TextAgg,
    pub top_m: usize,
    pub neighbor_weighting: NeighborWeighting,
}

impl ServerSettings {
    pub fn from_config(c: &FederationConfig) -> Self {
        match c.strategy {
            Strategy::Fedavg => Self { task_aware: false, text_agg: TextAgg::AllClients, top_m: c.top_m, neighbor_weighting: c.neighbor_weighting },
            _ => Self { task_aware: true, text_agg: c.effective_text_agg(), top_m: c.top_m, neighbor_weighting: c.neighbor_weighting },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerState {
    pub round: usize,
    pub task_adapters: BTreeMap<usize, ParamSet>,
    pub client_text: BTreeMap<usize, ParamSet>,
    pub reports: Vec<AggregationReport>,
}

/// Aggregates one upload per expected client and returns one broadcast per
/// client, in client order. Any missing or duplicated upload aborts the round.
pub fn server_aggregate_and_broadcast(
    server: &mut ServerState,
    uploads: &[ClientUpdate],
    expected: &[usize],
    settings: &ServerSettings,
    round: usize,
    stage: Stage,
) -> Result<Vec<Broadcast>> {
    let mut seen = BTreeSet::new();
    for u in uploads {
        if !seen.insert(u.client_id) {
            return Err(Error::Protocol(format!("client {} uploaded twice in round {round}", u.client_id)));
        }
        if !expected.contains(&u.client_id) {
            return Err(Error::Protocol(format!("unexpected upload from client {}", u.client_id)));
        }
    }
    let missing: Vec<String> = expected.iter().filter(|k| !seen.contains(k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("round {round} aborted: no upload from client(s) {}", missing.join(", "))));
    }
    let mut sorted: Vec<ClientUpdate> = uploads.to_vec();
    sorted.sort_by_key(|u| u.client_id);

    let visual = if settings.task_aware {
        task_aware_aggregate(&sorted)?
    } else {
        let global = fedavg_aggregate(&sorted, |u| &u.visual_params)?;
        sorted.iter().map(|u| (u.task_id, global.clone())).collect()
    };

    let mut report = AggregationReport::default();
    for u in &sorted {
        report.task_members.entry(u.task_id).or_default().push(u.client_id);
    }
    let text: BTreeMap<usize, ParamSet> = match settings.text_agg {
        TextAgg::TopM => {
            let (t, r) = adaptive_text_aggregate(&sorted, settings.top_m, settings.neighbor_weighting)?;
            report = r;
            t
        }
        TextAgg::SameTask => same_task_text_aggregate(&sorted)?,
        TextAgg::AllClients => {
            let avg = fedavg_aggregate(&sorted, |u| &u.text_params)?;
            sorted.iter().map(|u| (u.client_id, avg.clone())).collect()
        }
    };

    server.round = round;
    server.task_adapters = visual;
    server.client_text = text;
    server.reports.push(report);
    Ok(sorted
        .iter()
        .map(|u| Broadcast {
            round,
            stage,
            client_id: u.client_id,
            task_adapters: server.task_adapters.clone(),
            text: server.client_text[&u.client_id].clone(),
        })
        .collect())
}
