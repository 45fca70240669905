//! Multi-seed comparisons of strategies and toggle presets on identical shards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{preset, FederationConfig, Strategy};
use crate::error::{Error, Result};
use crate::protocol::run_federation;

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: FederationConfig,
}

impl Variant {
    /// A strategy name (`pilot`, `fedavg`, `local_only`) or a preset name.
    pub fn parse(base: &FederationConfig, name: &str) -> Result<Self> {
        let mut config = base.clone();
        if let Ok(s) = Strategy::parse(name) {
            config.strategy = s;
        } else {
            (preset(name)?.apply)(&mut config);
        }
        Ok(Self { name: name.to_string(), config })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Final accuracy per client.
    pub accuracy: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub per_seed: Vec<SeedResult>,
    /// Seed-averaged accuracy per client.
    pub client_accuracy: Vec<f64>,
    /// Seed-averaged accuracy minus the baseline's, per client.
    pub client_relative: Vec<f64>,
    pub task_accuracy: BTreeMap<usize, f64>,
    pub task_relative: BTreeMap<usize, f64>,
    pub mean_accuracy: f64,
    pub mean_relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub baseline: String,
    pub client_tasks: Vec<usize>,
    pub variants: Vec<VariantSummary>,
}

impl Comparison {
    pub fn get(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Plain-text table: one row per variant, per-task means then overall.
    pub fn render(&self) -> String {
        let tasks: Vec<usize> = self.variants.first().map(|v| v.task_accuracy.keys().copied().collect()).unwrap_or_default();
        let mut out = format!("{:<18}", "variant");
        for t in &tasks {
            out.push_str(&format!(" {:>9}", format!("task{t}")));
        }
        out.push_str(&format!(" {:>9} {:>10}\n", "mean", format!("Δ{}", self.baseline)));
        for v in &self.variants {
            out.push_str(&format!("{:<18}", v.name));
            for t in &tasks {
                out.push_str(&format!(" {:>9.4}", v.task_accuracy[t]));
            }
            out.push_str(&format!(" {:>9.4} {:>+10.4}\n", v.mean_accuracy, v.mean_relative));
        }
        out
    }

    /// Per-client relative scores, one row per variant.
    pub fn render_clients(&self) -> String {
        let mut out = format!("{:<18}", "relative");
        for (k, t) in self.client_tasks.iter().enumerate() {
            out.push_str(&format!(" {:>8}", format!("c{k}/t{t}")));
        }
        out.push('\n');
        for v in &self.variants {
            out.push_str(&format!("{:<18}", v.name));
            for d in &v.client_relative {
                out.push_str(&format!(" {:>+8.4}", d));
            }
            out.push('\n');
        }
        out
    }
}

fn run_one(cfg: &FederationConfig, seed: u64) -> Result<SeedResult> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.parallel = false;
    c.write_checkpoints = false;
    let run = run_federation(&c)?;
    let accuracy: Vec<f64> = run.history.final_accuracies().iter().map(|x| x.2).collect();
    let mean = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
    Ok(SeedResult { seed, accuracy, mean })
}

fn run_grid(variants: &[Variant], seeds: &[u64]) -> Result<Vec<Vec<SeedResult>>> {
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    #[cfg(feature = "parallel")]
    let flat: Vec<SeedResult> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(v, s)| run_one(&variants[v].config, s)).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let flat: Vec<SeedResult> = jobs.iter().map(|&(v, s)| run_one(&variants[v].config, s)).collect::<Result<_>>()?;
    let mut out: Vec<Vec<SeedResult>> = vec![Vec::new(); variants.len()];
    for ((v, _), r) in jobs.into_iter().zip(flat) {
        out[v].push(r);
    }
    Ok(out)
}

/// Runs every variant on every seed. Relative scores are measured against
/// `baseline` (one of the variant names).
pub fn compare(variants: &[Variant], seeds: &[u64], baseline: &str) -> Result<Comparison> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid("compare needs at least one variant and one seed".into()));
    }
    let base_idx = variants
        .iter()
        .position(|v| v.name == baseline)
        .ok_or_else(|| Error::Invalid(format!("baseline `{baseline}` is not among the variants")))?;
    let shape = (variants[0].config.clients, variants[0].config.tasks);
    if variants.iter().any(|v| (v.config.clients, v.config.tasks) != shape) {
        return Err(Error::Invalid("variants must share the client/task topology".into()));
    }
    let client_tasks: Vec<usize> = (0..shape.0).map(|k| crate::synthdata::task_of(k, shape.1)).collect();
    let grid = run_grid(variants, seeds)?;
    let avg = |rs: &[SeedResult]| -> Vec<f64> {
        let mut acc = vec![0.0; shape.0];
        for r in rs {
            for (a, v) in acc.iter_mut().zip(&r.accuracy) {
                *a += v / rs.len() as f64;
            }
        }
        acc
    };
    let base = avg(&grid[base_idx]);
    let task_mean = |vals: &[f64]| -> BTreeMap<usize, f64> {
        let mut m: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (k, v) in vals.iter().enumerate() {
            let e = m.entry(client_tasks[k]).or_default();
            e.0 += v;
            e.1 += 1;
        }
        m.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
    };
    let variants = variants
        .iter()
        .zip(grid)
        .map(|(v, per_seed)| {
            let client_accuracy = avg(&per_seed);
            let client_relative: Vec<f64> = client_accuracy.iter().zip(&base).map(|(a, b)| a - b).collect();
            let mean_accuracy = client_accuracy.iter().sum::<f64>() / shape.0 as f64;
            let mean_relative = client_relative.iter().sum::<f64>() / shape.0 as f64;
            VariantSummary {
                name: v.name.clone(),
                task_accuracy: task_mean(&client_accuracy),
                task_relative: task_mean(&client_relative),
                per_seed,
                client_accuracy,
                client_relative,
                mean_accuracy,
                mean_relative,
            }
        })
        .collect();
    Ok(Comparison { seeds: seeds.to_vec(), baseline: baseline.to_string(), client_tasks, variants })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FederationConfig {
        FederationConfig {
            clients: 3,
            tasks: 3,
            samples_per_client: 20,
            rounds: 2,
            top_m: 1,
            batch_size: 6,
            lr_stage1: 1e-2,
            lr_stage2: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let base = tiny();
        let vs = vec![Variant::parse(&base, "pilot").unwrap(), Variant { name: "again".into(), config: base.clone() }];
        let c = compare(&vs, &[1, 2], "pilot").unwrap();
        assert!(c.variants.iter().all(|v| v.client_relative.iter().all(|d| *d == 0.0)));
    }

    #[test]
    fn table_shape() {
        let base = tiny();
        let vs: Vec<_> = ["pilot", "fedavg", "local_only"].iter().map(|n| Variant::parse(&base, n).unwrap()).collect();
        let c = compare(&vs, &[3], "local_only").unwrap();
        assert_eq!(c.variants.len(), 3);
        assert!(c.variants.iter().all(|v| v.client_accuracy.len() == 3 && v.task_accuracy.len() == 3));
        assert!(c.get("local_only").unwrap().mean_relative == 0.0);
        assert!(c.render().lines().count() == 4);
    }

    #[test]
    fn unknown_variant_is_config_error() {
        assert!(Variant::parse(&tiny(), "bogus").unwrap_err().is_config());
    }
}
