//! Experiment description, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::NeighborWeighting;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_LAMBDAS;
use crate::model::{CrossInit, ModelDims, RouterPooling};
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Pilot,
    /// One connector and text adapter averaged over every client.
    Fedavg,
    /// No communication at all.
    LocalOnly,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pilot => "pilot",
            Strategy::Fedavg => "fedavg",
            Strategy::LocalOnly => "local_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "pilot" => Ok(Strategy::Pilot),
            "fedavg" => Ok(Strategy::Fedavg),
            "local_only" | "local" => Ok(Strategy::LocalOnly),
            other => Err(Error::Config(vec![format!("unknown strategy `{other}` (pilot, fedavg, local_only)")])),
        }
    }
}

/// How text adapters are combined on the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextAgg {
    /// The `M` nearest text adapters, inverse-distance weighted.
    #[default]
    TopM,
    SameTask,
    AllClients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub seed: u64,
    pub clients: usize,
    pub tasks: usize,
    /// Samples per client when `sizes` is empty.
    pub samples_per_client: usize,
    pub sizes: Vec<usize>,
    pub heterogeneity: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub top_m: usize,
    pub rounds: usize,
    pub stage1_rounds: usize,
    pub local_epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub cross_adapter: bool,
    pub diff_loss: bool,
    pub aux_losses: bool,
    pub ata: bool,
    pub cross_init: CrossInit,
    pub text_agg: TextAgg,
    pub neighbor_weighting: NeighborWeighting,
    pub pooling: RouterPooling,
    /// Re-create router and cross adapters at every broadcast instead of once.
    pub reinit_router_each_round: bool,
    /// Keep the client-specific adapter out of the stage-2 forward pass.
    pub drop_client_adapter_in_stage2: bool,
    /// Train clients on worker threads.
    pub parallel: bool,
    pub write_checkpoints: bool,
    pub output_dir: String,
    pub model: ModelDims,
    pub synth: SynthConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            clients: 9,
            tasks: 3,
            samples_per_client: 200,
            sizes: Vec::new(),
            heterogeneity: 0.7,
            lambda0: DEFAULT_LAMBDAS.0,
            lambda1: DEFAULT_LAMBDAS.1,
            lambda2: DEFAULT_LAMBDAS.2,
            top_m: 6,
            rounds: 3,
            stage1_rounds: 1,
            local_epochs: 1,
            lr_stage1: 2e-5,
            lr_stage2: 4e-5,
            batch_size: 16,
            strategy: Strategy::Pilot,
            cross_adapter: true,
            diff_loss: true,
            aux_losses: true,
            ata: true,
            cross_init: CrossInit::Local,
            text_agg: TextAgg::TopM,
            neighbor_weighting: NeighborWeighting::Renormalized,
            pooling: RouterPooling::MeanLogits,
            reinit_router_each_round: false,
            drop_client_adapter_in_stage2: false,
            parallel: true,
            write_checkpoints: true,
            output_dir: "runs".into(),
            model: ModelDims::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl FederationConfig {
    /// The desk-scale comparison scenario: default topology and protocol with
    /// learning rates, local epochs and data knobs sized for toy models.
    pub fn scenario() -> Self {
        Self {
            local_epochs: 1,
            lr_stage1: 0.003,
            lr_stage2: 0.003,
            batch_size: 8,
            synth: SynthConfig {
                signal: 8.0,
                shared_visual: 0.5,
                shared_head: 0.0,
                client_map: 0.15,
                client_shift: 1.5,
                ..SynthConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        if self.sizes.is_empty() {
            vec![self.samples_per_client; self.clients]
        } else {
            self.sizes.clone()
        }
    }

    /// Text aggregation actually used: without ATA every client gets the
    /// all-client average.
    pub fn effective_text_agg(&self) -> TextAgg {
        if self.ata {
            self.text_agg
        } else {
            TextAgg::AllClients
        }
    }

    pub fn effective_lambdas(&self) -> (f64, f64, f64) {
        let l0 = if self.diff_loss { self.lambda0 } else { 0.0 };
        let (l1, l2) = if self.aux_losses { (self.lambda1, self.lambda2) } else { (0.0, 0.0) };
        (l0, l1, l2)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.tasks < 1 {
            p.push("tasks must be at least 1".to_string());
        }
        if self.clients < self.tasks {
            p.push(format!("clients ({}) must be at least tasks ({})", self.clients, self.tasks));
        }
        if self.top_m < 1 {
            p.push("top_m must be at least 1".into());
        }
        if self.rounds < 1 {
            p.push("rounds must be at least 1".into());
        }
        if self.stage1_rounds < 1 || self.stage1_rounds > self.rounds {
            p.push(format!("stage1_rounds ({}) must be in 1..=rounds ({})", self.stage1_rounds, self.rounds));
        }
        if self.batch_size < 1 {
            p.push("batch_size must be at least 1".into());
        }
        for (name, v) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda0", self.lambda0), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            p.push(format!("heterogeneity must be in [0, 1], got {}", self.heterogeneity));
        }
        if !self.sizes.is_empty() && self.sizes.len() != self.clients {
            p.push(format!("sizes lists {} clients but clients = {}", self.sizes.len(), self.clients));
        }
        let sizes = self.shard_sizes();
        if let Some((k, n)) = sizes.iter().enumerate().find(|(_, &n)| n < 2) {
            p.push(format!("client {k} has {n} samples; at least 2 are needed"));
        } else if self.batch_size >= 1 {
            let f = self.synth.eval_fraction;
            let smallest = sizes.iter().map(|&n| n - ((n as f64 * f).round() as usize).clamp(1, n - 1)).min();
            if let Some(train) = smallest {
                if self.batch_size > train {
                    p.push(format!("batch_size {} exceeds the smallest training split ({train})", self.batch_size));
                }
            }
        }
        let d = &self.model;
        if [d.d_raw, d.c_in, d.c_hid, d.c, d.n_tokens, d.vocab, d.ins_vocab, d.rank].contains(&0) {
            p.push("model dimensions must all be positive".into());
        }
        if self.tasks > d.d_raw {
            p.push(format!("tasks ({}) cannot exceed model.d_raw ({})", self.tasks, d.d_raw));
        }
        if !(d.alpha > 0.0) {
            p.push("model.alpha must be positive".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<FederationConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    FederationConfig::from_toml(&text)
}

/// Named toggle combinations for the ablation and comparison grids.
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub apply: fn(&mut FederationConfig),
}

pub fn presets() -> Vec<Preset> {
    fn ablate(c: &mut FederationConfig, ata: bool, cross: bool, aux: bool, diff: bool) {
        c.strategy = Strategy::Pilot;
        c.ata = ata;
        c.cross_adapter = cross;
        c.aux_losses = aux;
        c.diff_loss = diff;
    }
    vec![
        Preset {
            name: "ablate-all",
            description: "pilot without ATA, cross adapters, router losses or difference loss",
            apply: |c| ablate(c, false, false, false, false),
        },
        Preset { name: "ata-only", description: "ATA on; cross adapters, router losses, difference loss off", apply: |c| ablate(c, true, false, false, false) },
        Preset { name: "ata-cross", description: "ATA and cross adapters; no router or difference loss", apply: |c| ablate(c, true, true, false, false) },
        Preset { name: "ata-cross-aux", description: "everything except the difference loss", apply: |c| ablate(c, true, true, true, false) },
        Preset { name: "full", description: "full pilot (all components on)", apply: |c| ablate(c, true, true, true, true) },
        Preset {
            name: "text-same-task",
            description: "text adapters averaged over same-task clients only",
            apply: |c| {
                c.ata = true;
                c.text_agg = TextAgg::SameTask;
            },
        },
        Preset {
            name: "text-all-clients",
            description: "text adapters averaged over all clients",
            apply: |c| {
                c.ata = true;
                c.text_agg = TextAgg::AllClients;
            },
        },
        Preset { name: "top-m5", description: "adaptive text aggregation with M=5", apply: |c| c.top_m = 5 },
        Preset { name: "top-m6", description: "adaptive text aggregation with M=6", apply: |c| c.top_m = 6 },
        Preset { name: "top-m7", description: "adaptive text aggregation with M=7", apply: |c| c.top_m = 7 },
        Preset { name: "cross-init-random", description: "cross adapters start from random weights", apply: |c| c.cross_init = CrossInit::Random },
        Preset { name: "cross-init-local", description: "cross adapters start from the local task adapter", apply: |c| c.cross_init = CrossInit::Local },
        Preset { name: "fedavg", description: "FedAvg over connector and text adapter", apply: |c| c.strategy = Strategy::Fedavg },
        Preset { name: "local-only", description: "each client trains alone", apply: |c| c.strategy = Strategy::LocalOnly },
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(vec![format!("unknown preset `{name}`; see --list-presets")]))
}
