//! Per-round metrics of a run and their JSON / CSV forms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationReport;
use crate::config::FederationConfig;
use crate::error::Result;

/// Column order of the flat CSV export.
pub const CSV_COLUMNS: [&str; 13] = [
    "round", "client", "task", "stage", "ce", "diff", "balance", "zloss", "total", "accuracy", "bytes_up",
    "bytes_down", "steps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub round: usize,
    pub client: usize,
    pub task: usize,
    pub stage: u8,
    pub ce: f64,
    pub diff: f64,
    pub balance: f64,
    pub zloss: f64,
    pub total: f64,
    pub accuracy: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub stage: u8,
    pub mean_accuracy: f64,
    pub clients: Vec<ClientRecord>,
    pub aggregation: Option<AggregationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationHistory {
    pub run_id: String,
    pub config: FederationConfig,
    pub rounds: Vec<RoundRecord>,
}

impl FederationHistory {
    pub fn stage_tags(&self) -> Vec<u8> {
        self.rounds.iter().map(|r| r.stage).collect()
    }

    /// Final-round accuracy per client, in client order.
    pub fn final_accuracies(&self) -> Vec<(usize, usize, f64)> {
        self.rounds
            .last()
            .map(|r| r.clients.iter().map(|c| (c.client, c.task, c.accuracy)).collect())
            .unwrap_or_default()
    }

    pub fn final_task_means(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (_, t, a) in self.final_accuracies() {
            let e = acc.entry(t).or_default();
            e.0 += a;
            e.1 += 1;
        }
        acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
    }

    pub fn final_mean_accuracy(&self) -> f64 {
        self.rounds.last().map(|r| r.mean_accuracy).unwrap_or(0.0)
    }

    pub fn total_bytes_up(&self) -> usize {
        self.rounds.iter().flat_map(|r| &r.clients).map(|c| c.bytes_up).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rounds {
            for c in &r.clients {
                w.serialize(c)?;
            }
        }
        if self.rounds.iter().all(|r| r.clients.is_empty()) {
            w.write_record(CSV_COLUMNS)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("history.json"), self.to_json()?)?;
        std::fs::write(dir.join("history.csv"), self.to_csv()?)?;
        Ok(())
    }
}
