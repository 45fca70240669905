//! Federated round loop: local training, upload, aggregation barrier,
//! broadcast, and the one-time switch from stage 1 to stage 2.

pub mod client;
pub mod history;
pub mod messages;
pub mod server;

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{FederationConfig, Strategy};
use crate::error::Result;
use crate::losses::Stage;
use crate::model::{ClientModel, Connector, TextAdapterParams, ToyBackbone};
use crate::params::ParamSet;
use crate::seeding::{self, Purpose};
use crate::synthdata::{generate_federation, Federation};

pub use client::{
    apply_broadcast, client_local_stage1, client_local_stage2, client_transition_to_stage2, evaluate_client,
    ClientState, EncodedShard, LocalOutcome, LocalSettings, MoaOptions,
};
pub use history::{ClientRecord, FederationHistory, RoundRecord, CSV_COLUMNS};
pub use messages::{check_payload, Broadcast, MessageKind, RoundMessage, Transport};
pub use server::{server_aggregate_and_broadcast, ServerSettings, ServerState};

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct FederationRun {
    pub history: FederationHistory,
    /// `(relative path, container)` per round and participant.
    pub checkpoints: Vec<(String, Checkpoint)>,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub backbone: ToyBackbone,
}

impl FederationRun {
    /// History JSON and CSV plus every checkpoint under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.history.write(dir)?;
        let mut out = vec![dir.join("history.json"), dir.join("history.csv")];
        for (rel, ck) in &self.checkpoints {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            ck.save(&path)?;
            out.push(path);
        }
        Ok(out)
    }
}

pub fn backbone_for(cfg: &FederationConfig) -> ToyBackbone {
    ToyBackbone::new(cfg.model, &mut seeding::rng(cfg.seed, Purpose::Backbone, 0))
}

pub fn federation_for(cfg: &FederationConfig, backbone: &ToyBackbone) -> Result<Federation> {
    generate_federation(cfg.seed, cfg.clients, cfg.tasks, &cfg.shard_sizes(), cfg.heterogeneity, &cfg.synth, backbone)
}

/// Starting model shared by every client of a run.
pub fn initial_model(cfg: &FederationConfig, backbone: &ToyBackbone) -> ClientModel {
    let text = TextAdapterParams::init(&cfg.model, &mut seeding::rng(cfg.seed, Purpose::Init, 0));
    let pretrained = backbone.pretrained_connector.clone();
    let dual = cfg.strategy == Strategy::Pilot && cfg.diff_loss;
    ClientModel {
        connector: Connector::Single(pretrained.clone()),
        // same hidden layer as the pretrained connector, silent output layer
        client_adapter: dual.then(|| pretrained.with_output_scale(0.0)),
        use_client_adapter: dual,
        text,
        pooling: cfg.pooling,
    }
}

pub fn run_id(cfg: &FederationConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    let short: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{}-seed{}-{short}", cfg.strategy.name(), cfg.seed)
}

fn for_each_client<T, F>(clients: &mut [ClientState], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ClientState) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return clients.par_iter_mut().map(f).collect();
    }
    let _ = parallel;
    clients.iter_mut().map(f).collect()
}

/// Every tensor a client holds, for its local checkpoint.
pub fn client_checkpoint(c: &ClientState, round: usize) -> Checkpoint {
    let mut p = ParamSet::new();
    match &c.model.connector {
        Connector::Single(a) => p.extend_prefixed("connector.task", &a.to_params()),
        Connector::Moa(m) => {
            p.extend_prefixed("connector.local", &m.local_adapter.to_params());
            for (i, (t, a)) in m.foreign_task_ids.iter().zip(&m.foreign_adapters).enumerate() {
                p.extend_prefixed(&format!("connector.foreign{i}_task{t}"), &a.to_params());
            }
            for (i, a) in m.cross_adapters.iter().enumerate() {
                p.extend_prefixed(&format!("connector.cross{i}"), &a.to_params());
            }
            p.extend_prefixed("connector.router", &m.router.to_params());
        }
    }
    if let Some(a) = &c.model.client_adapter {
        p.extend_prefixed("client", &a.to_params());
    }
    p.extend_prefixed("text", &c.model.text.to_params());
    Checkpoint::new(p)
        .with_meta("role", "client")
        .with_meta("client_id", c.client_id)
        .with_meta("task_id", c.task_id)
        .with_meta("round", round)
        .with_meta("stage", c.stage.tag())
}

pub fn server_checkpoint(s: &ServerState) -> Checkpoint {
    let mut p = ParamSet::new();
    for (t, a) in &s.task_adapters {
        p.extend_prefixed(&format!("task{t}"), a);
    }
    for (k, a) in &s.client_text {
        p.extend_prefixed(&format!("text{k}"), a);
    }
    Checkpoint::new(p).with_meta("role", "server").with_meta("round", s.round)
}

pub fn moa_options(cfg: &FederationConfig) -> MoaOptions {
    MoaOptions {
        cross_adapter: cfg.cross_adapter,
        cross_init: cfg.cross_init,
        reinit_each_round: cfg.reinit_router_each_round,
        drop_client_adapter: cfg.drop_client_adapter_in_stage2,
    }
}

pub fn run_federation(cfg: &FederationConfig) -> Result<FederationRun> {
    cfg.validate()?;
    let backbone = backbone_for(cfg);
    let fed = federation_for(cfg, &backbone)?;
    run_on(cfg, backbone, &fed)
}

/// Runs `cfg` on an already generated federation.
pub fn run_on(cfg: &FederationConfig, backbone: ToyBackbone, fed: &Federation) -> Result<FederationRun> {
    cfg.validate()?;
    let init = initial_model(cfg, &backbone);
    let mut clients = fed
        .shards
        .iter()
        .map(|s| ClientState::new(s, &backbone, init.clone(), cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut cross_rngs: Vec<ChaCha8Rng> =
        (0..clients.len()).map(|k| seeding::rng(cfg.seed, Purpose::CrossInit, k as u64)).collect();
    let expected: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
    let server_settings = ServerSettings::from_config(cfg);
    let opts = moa_options(cfg);
    let lambdas = cfg.effective_lambdas();
    let mut server = ServerState::default();
    let mut transport = Transport::default();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut checkpoints = Vec::new();

    for r in 1..=cfg.rounds {
        let stage = if r <= cfg.stage1_rounds { Stage::One } else { Stage::Two };
        let settings = LocalSettings {
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            lr: if stage == Stage::One { cfg.lr_stage1 } else { cfg.lr_stage2 },
            lambdas,
            round: r,
        };
        let bb = &backbone;
        let mut outcomes = for_each_client(&mut clients, cfg.parallel, |c| match c.stage {
            Stage::One => client_local_stage1(c, bb, &settings),
            Stage::Two => client_local_stage2(c, bb, &settings),
        })?;
        for o in &mut outcomes {
            o.update.stage = stage;
        }

        let mut up_bytes = vec![0; clients.len()];
        let mut down_bytes = vec![0; clients.len()];
        let mut aggregation = None;
        if cfg.strategy != Strategy::LocalOnly {
            for o in &outcomes {
                transport.send(RoundMessage::upload(&o.update))?;
            }
            let uploads = transport
                .drain(MessageKind::Upload)
                .iter()
                .map(|m| {
                    up_bytes[m.client_id] = m.size();
                    m.decode_upload()
                })
                .collect::<Result<Vec<_>>>()?;
            let broadcasts = server_aggregate_and_broadcast(&mut server, &uploads, &expected, &server_settings, r, stage)?;
            aggregation = server.reports.last().cloned();
            for b in &broadcasts {
                transport.send(RoundMessage::broadcast(b))?;
            }
            for m in transport.drain(MessageKind::Broadcast) {
                down_bytes[m.client_id] = m.size();
                let b = m.decode_broadcast()?;
                let c = &mut clients[b.client_id];
                let rng = &mut cross_rngs[b.client_id];
                if cfg.strategy == Strategy::Pilot && c.stage == Stage::One && r == cfg.stage1_rounds {
                    client_transition_to_stage2(c, &b, opts, rng)?;
                } else {
                    apply_broadcast(c, &b, opts, rng)?;
                }
            }
        }

        let accs = for_each_client(&mut clients, cfg.parallel, |c| evaluate_client(c, bb, &c.eval))?;
        let records: Vec<ClientRecord> = clients
            .iter()
            .zip(&outcomes)
            .zip(&accs)
            .map(|((c, o), &acc)| ClientRecord {
                round: r,
                client: c.client_id,
                task: c.task_id,
                stage: stage.tag(),
                ce: o.losses.ce,
                diff: o.losses.diff,
                balance: o.losses.balance,
                zloss: o.losses.zloss,
                total: o.losses.total,
                accuracy: acc,
                bytes_up: up_bytes[c.client_id],
                bytes_down: down_bytes[c.client_id],
                steps: o.steps,
            })
            .collect();
        let mean_accuracy = accs.iter().sum::<f64>() / accs.len() as f64;
        rounds.push(RoundRecord { round: r, stage: stage.tag(), mean_accuracy, clients: records, aggregation });

        if cfg.write_checkpoints {
            for c in &clients {
                checkpoints.push((format!("checkpoints/round{r}/client{}.ckpt", c.client_id), client_checkpoint(c, r)));
            }
            if cfg.strategy != Strategy::LocalOnly {
                checkpoints.push((format!("checkpoints/round{r}/server.ckpt"), server_checkpoint(&server)));
            }
        }
    }

    Ok(FederationRun {
        history: FederationHistory { run_id: run_id(cfg), config: cfg.clone(), rounds },
        checkpoints,
        clients,
        server,
        backbone,
    })
}
