//! Client side: local optimisation in both stages, the switch to the
//! mixture-of-adapters connector, and evaluation.

use rand_chacha::ChaCha8Rng;

use crate::aggregation::ClientUpdate;
use crate::error::{Error, Result};
use crate::losses::{stage1_objective, stage2_objective, LossBreakdown, Stage};
use crate::model::{
    init_cross_task_adapters, AdapterParams, ClientModel, Connector, CrossInit, CtMoaModule, EncodedBatch,
    RouterParams, ToyBackbone, TrainMask,
};
use crate::numerics::{optimizer_step, Graph, OptimizerState, Tensor};
use crate::params::ParamSet;
use crate::synthdata::{BatchSampler, ClientShard};

use super::messages::Broadcast;

/// Frozen encoder outputs of a shard, computed once.
#[derive(Debug, Clone)]
pub struct EncodedShard {
    pub h: Vec<Tensor>,
    pub instr: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub n_tokens: usize,
}

impl EncodedShard {
    pub fn encode(backbone: &ToyBackbone, shard: &ClientShard) -> Result<Self> {
        let mut h = Vec::with_capacity(shard.n_k());
        let mut instr = Vec::with_capacity(shard.n_k());
        for s in &shard.samples {
            if s.features.rows() != backbone.dims.n_tokens {
                return Err(Error::Data(format!(
                    "sample has {} tokens, model expects {}",
                    s.features.rows(),
                    backbone.dims.n_tokens
                )));
            }
            h.push(backbone.vision_encode(&s.features)?);
            instr.push(backbone.instruction_mean(&s.instruction)?);
        }
        Ok(Self {
            h,
            instr,
            targets: shard.samples.iter().map(|s| s.answer).collect(),
            n_tokens: backbone.dims.n_tokens,
        })
    }

    pub fn batch(&self, idx: &[usize]) -> Result<EncodedBatch> {
        if idx.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let c_in = self.h[0].cols();
        let c = self.instr[0].len();
        let mut h = Vec::with_capacity(idx.len() * self.n_tokens * c_in);
        let mut instr = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            h.extend_from_slice(self.h[i].data());
            instr.extend_from_slice(&self.instr[i]);
        }
        Ok(EncodedBatch {
            h: Tensor::new(vec![idx.len() * self.n_tokens, c_in], h)?,
            instr: Tensor::new(vec![idx.len(), c], instr)?,
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            n_tokens: self.n_tokens,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub task_id: usize,
    pub stage: Stage,
    pub model: ClientModel,
    pub data: EncodedShard,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub sampler: BatchSampler,
}

/// Knobs for one round of local optimisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambdas: (f64, f64, f64),
    pub round: usize,
}

/// What one round of local training produced.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    /// Component-wise mean over all steps of the round.
    pub losses: LossBreakdown,
    pub steps: usize,
}

/// How the mixture-of-adapters connector is assembled and refreshed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoaOptions {
    pub cross_adapter: bool,
    pub cross_init: CrossInit,
    pub reinit_each_round: bool,
    pub drop_client_adapter: bool,
}

impl ClientState {
    pub fn new(shard: &ClientShard, backbone: &ToyBackbone, model: ClientModel, seed: u64) -> Result<Self> {
        if shard.train.is_empty() {
            return Err(Error::Data(format!("client {} has no training samples", shard.client_id)));
        }
        Ok(Self {
            client_id: shard.client_id,
            task_id: shard.task_id,
            stage: Stage::One,
            model,
            data: EncodedShard::encode(backbone, shard)?,
            train: shard.train.clone(),
            eval: shard.eval.clone(),
            sampler: BatchSampler::new(shard.train.clone(), seed, shard.client_id as u64),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.train.len()
    }

    fn upload(&self, round: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: self.client_id,
            task_id: self.task_id,
            sample_count: self.sample_count(),
            visual_params: self.model.connector.task_adapter().to_params(),
            text_params: self.model.text.to_params(),
            round,
            stage: self.stage,
        }
    }
}

fn mean_breakdown(stage: Stage, lambdas: (f64, f64, f64), parts: &[LossBreakdown]) -> LossBreakdown {
    let mut out = LossBreakdown { stage, ce: 0.0, diff: 0.0, balance: 0.0, zloss: 0.0, total: 0.0, lambdas };
    if parts.is_empty() {
        return out;
    }
    let n = parts.len() as f64;
    for p in parts {
        out.ce += p.ce / n;
        out.diff += p.diff / n;
        out.balance += p.balance / n;
        out.zloss += p.zloss / n;
        out.total += p.total / n;
    }
    out
}

fn train(state: &mut ClientState, backbone: &ToyBackbone, s: &LocalSettings, mask: TrainMask) -> Result<LocalOutcome> {
    let stage = state.stage;
    let mut params = state.model.trainable_params(mask);
    let mut opt = OptimizerState::new(&params, s.lr)?;
    let mut parts = Vec::new();
    for _ in 0..s.epochs {
        for idx in state.sampler.epoch_batches(s.batch_size)? {
            let batch = state.data.batch(&idx)?;
            let mut g = Graph::new();
            let fv = state.model.forward(&mut g, backbone, &batch, mask)?;
            let ce = g.cross_entropy(fv.logits, &batch.targets)?;
            let obj = match stage {
                Stage::One => stage1_objective(&mut g, ce, fv.x_t, fv.x_s, batch.n_tokens, s.lambdas.0)?,
                Stage::Two => {
                    let routing = fv.routing.as_ref().map(|r| (r.per_token, r.logits));
                    stage2_objective(&mut g, ce, routing, s.lambdas.1, s.lambdas.2)?
                }
            };
            if !obj.breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!("client {} loss", state.client_id)));
            }
            let grads = g.backward(obj.total)?;
            let grad_set: ParamSet = fv.trainables.iter().map(|(n, v)| (n.clone(), grads.wrt(*v))).collect();
            params = optimizer_step(&params, &grad_set, &mut opt)?;
            state.model.set_trainable(&params, mask)?;
            parts.push(obj.breakdown);
        }
    }
    let lambdas = match stage {
        Stage::One => (s.lambdas.0, 0.0, 0.0),
        Stage::Two => (0.0, s.lambdas.1, s.lambdas.2),
    };
    Ok(LocalOutcome { update: state.upload(s.round), losses: mean_breakdown(stage, lambdas, &parts), steps: parts.len() })
}

/// `E` epochs of the stage-1 objective. The client-specific adapter is trained
/// but only the task adapter and text adapter are uploaded.
pub fn client_local_stage1(state: &mut ClientState, backbone: &ToyBackbone, s: &LocalSettings) -> Result<LocalOutcome> {
    if state.stage != Stage::One {
        return Err(Error::Protocol(format!("client {} is not in stage 1", state.client_id)));
    }
    let mask = TrainMask { connector: true, client_adapter: true, text: true };
    train(state, backbone, s, mask)
}

/// `E` epochs of the stage-2 objective over local adapter, cross adapters,
/// router and text adapter; foreign adapters and the client adapter stay fixed.
pub fn client_local_stage2(state: &mut ClientState, backbone: &ToyBackbone, s: &LocalSettings) -> Result<LocalOutcome> {
    if state.stage != Stage::Two {
        return Err(Error::Protocol(format!("client {} is not in stage 2", state.client_id)));
    }
    let mask = TrainMask { connector: true, client_adapter: false, text: true };
    train(state, backbone, s, mask)
}

fn own_adapter(state: &ClientState, b: &Broadcast) -> Result<AdapterParams> {
    let p = b.task_adapters.get(&state.task_id).ok_or_else(|| {
        Error::Protocol(format!("broadcast to client {} lacks task {}", state.client_id, state.task_id))
    })?;
    AdapterParams::from_params(p)
}

fn foreign(state: &ClientState, b: &Broadcast) -> Result<(Vec<usize>, Vec<AdapterParams>)> {
    let mut ids = Vec::new();
    let mut adapters = Vec::new();
    for (&t, p) in &b.task_adapters {
        if t != state.task_id {
            ids.push(t);
            adapters.push(AdapterParams::from_params(p)?);
        }
    }
    Ok((ids, adapters))
}

/// Builds the mixture-of-adapters connector from the first broadcast:
/// local slot from this client's task aggregate, foreign slots from the
/// others, fresh cross adapters and a zero router.
pub fn client_transition_to_stage2(
    state: &mut ClientState,
    b: &Broadcast,
    opts: MoaOptions,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if state.stage != Stage::One {
        return Err(Error::Protocol(format!("client {} already left stage 1", state.client_id)));
    }
    let local = own_adapter(state, b)?;
    let (ids, foreign_adapters) = foreign(state, b)?;
    state.model.connector = if foreign_adapters.is_empty() {
        Connector::Single(local)
    } else {
        let c_in = local.w1.rows();
        let mut m = CtMoaModule {
            local_task_id: state.task_id,
            local_adapter: local,
            foreign_task_ids: ids,
            foreign_adapters,
            cross_adapters: Vec::new(),
            router: RouterParams::zeros(c_in, b.task_adapters.len())?,
        };
        let moa_dims = adapter_dims(&m.local_adapter);
        init_cross_task_adapters(&mut m, opts.cross_adapter, opts.cross_init, &moa_dims, rng);
        m.validate()?;
        Connector::Moa(m)
    };
    state.model.text.set_params(&b.text)?;
    if opts.drop_client_adapter {
        state.model.use_client_adapter = false;
    }
    state.stage = Stage::Two;
    Ok(())
}

/// Installs a later broadcast: aggregate adapters replace the local and
/// foreign slots; router and cross adapters persist unless re-init is asked.
pub fn apply_broadcast(state: &mut ClientState, b: &Broadcast, opts: MoaOptions, rng: &mut ChaCha8Rng) -> Result<()> {
    let local = own_adapter(state, b)?;
    let (ids, foreign_adapters) = foreign(state, b)?;
    match &mut state.model.connector {
        Connector::Single(a) => *a = local,
        Connector::Moa(m) => {
            if ids != m.foreign_task_ids {
                return Err(Error::Protocol(format!(
                    "broadcast tasks {ids:?} do not match the connector's {:?}",
                    m.foreign_task_ids
                )));
            }
            m.local_adapter = local;
            m.foreign_adapters = foreign_adapters;
            if opts.reinit_each_round {
                m.router = RouterParams::zeros(m.router.w.rows(), m.tasks())?;
                let dims = adapter_dims(&m.local_adapter);
                init_cross_task_adapters(m, opts.cross_adapter, opts.cross_init, &dims, rng);
            }
        }
    }
    state.model.text.set_params(&b.text)
}

fn adapter_dims(a: &AdapterParams) -> crate::model::ModelDims {
    crate::model::ModelDims { c_in: a.w1.rows(), c_hid: a.w1.cols(), c: a.w2.cols(), ..Default::default() }
}

/// Fraction of `indices` whose argmax answer is correct.
pub fn evaluate_client(state: &ClientState, backbone: &ToyBackbone, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data(format!("client {} has an empty eval split", state.client_id)));
    }
    let batch = state.data.batch(indices)?;
    let pred = state.model.predict(backbone, &batch)?;
    let hits = pred.iter().zip(&batch.targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / indices.len() as f64)
}
