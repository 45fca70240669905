//! Toy multimodal model: a frozen vision projection, the two-stage connector
//! (task/client adapters, then the cross-task mixture of adapters), a
//! low-rank text adapter and a frozen answer head.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, Graph, Tensor, Var};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_raw: usize,
    pub c_in: usize,
    pub c_hid: usize,
    pub c: usize,
    pub n_tokens: usize,
    pub vocab: usize,
    pub ins_vocab: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { d_raw: 16, c_in: 16, c_hid: 32, c: 16, n_tokens: 4, vocab: 32, ins_vocab: 16, rank: 4, alpha: 8.0 }
    }
}

impl ModelDims {
    pub fn lora_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from caller")
}

/// Frozen parts shared bit-for-bit by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub dims: ModelDims,
    pub vision_proj: Tensor,
    pub token_head: Tensor,
    pub instruction_embed: Tensor,
    /// Connector every client starts from.
    pub pretrained_connector: AdapterParams,
}

impl ToyBackbone {
    pub fn new(dims: ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let vision_proj = normal_tensor(rng, &[dims.d_raw, dims.c_in], (1.0 / dims.d_raw as f64).sqrt());
        let token_head = normal_tensor(rng, &[dims.c, dims.vocab], (1.0 / dims.c as f64).sqrt());
        let instruction_embed = normal_tensor(rng, &[dims.ins_vocab, dims.c], 0.1);
        let pretrained_connector = AdapterParams::random(&dims, rng);
        Self { dims, vision_proj, token_head, instruction_embed, pretrained_connector }
    }

    /// `H^v = GELU(X · W_v)`.
    pub fn vision_encode(&self, raw: &Tensor) -> Result<Tensor> {
        if raw.cols() != self.dims.d_raw {
            return Err(Error::Shape(format!(
                "raw features {:?} do not match vision width {}",
                raw.shape(),
                self.dims.d_raw
            )));
        }
        Ok(raw.matmul(&self.vision_proj)?.map(gelu))
    }

    /// Mean instruction embedding; zero for an empty instruction.
    pub fn instruction_mean(&self, instruction: &[usize]) -> Result<Vec<f64>> {
        let c = self.dims.c;
        let mut out = vec![0.0; c];
        if instruction.is_empty() {
            return Ok(out);
        }
        for &tok in instruction {
            if tok >= self.dims.ins_vocab {
                return Err(Error::Index(format!("instruction token {tok} outside {}", self.dims.ins_vocab)));
            }
            for (o, v) in out.iter_mut().zip(self.instruction_embed.row(tok)) {
                *o += v;
            }
        }
        let inv = 1.0 / instruction.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(out)
    }
}

/// Two-layer perceptron `GELU(H W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AdapterParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            w1: Tensor::zeros(&[dims.c_in, dims.c_hid]),
            b1: Tensor::zeros(&[dims.c_hid]),
            w2: Tensor::zeros(&[dims.c_hid, dims.c]),
            b2: Tensor::zeros(&[dims.c]),
        }
    }

    pub fn random(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: normal_tensor(rng, &[dims.c_in, dims.c_hid], (1.0 / dims.c_in as f64).sqrt()),
            b1: Tensor::zeros(&[dims.c_hid]),
            w2: normal_tensor(rng, &[dims.c_hid, dims.c], (1.0 / dims.c_hid as f64).sqrt()),
            b2: Tensor::zeros(&[dims.c]),
        }
    }

    /// Same hidden layer, output layer multiplied by `s`.
    pub fn with_output_scale(&self, s: f64) -> Self {
        Self { w1: self.w1.clone(), b1: self.b1.clone(), w2: self.w2.scale(s), b2: self.b2.scale(s) }
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let ok = self.w1.shape() == [dims.c_in, dims.c_hid]
            && self.b1.shape() == [dims.c_hid]
            && self.w2.shape() == [dims.c_hid, dims.c]
            && self.b2.shape() == [dims.c];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "adapter shapes w1{:?} b1{:?} w2{:?} b2{:?} do not fit {dims:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )))
        }
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w1", self.w1.clone());
        p.insert("b1", self.b1.clone());
        p.insert("w2", self.w2.clone());
        p.insert("b2", self.b2.clone());
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self {
            w1: p.require("w1")?.clone(),
            b1: p.require("b1")?.clone(),
            w2: p.require("w2")?.clone(),
            b2: p.require("b2")?.clone(),
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAdapter {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        BoundAdapter { w1: leaf(&self.w1), b1: leaf(&self.b1), w2: leaf(&self.w2), b2: leaf(&self.b2) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundAdapter {
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let z = g.matmul(h, self.w1)?;
        let z = g.add_bias(z, self.b1)?;
        let z = g.gelu(z);
        let z = g.matmul(z, self.w2)?;
        g.add_bias(z, self.b2)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.b1"), self.b1),
            (format!("{prefix}.b2"), self.b2),
            (format!("{prefix}.w1"), self.w1),
            (format!("{prefix}.w2"), self.w2),
        ]
    }
}

pub fn adapter_forward(h: &Tensor, p: &AdapterParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let out = p.bind(&mut g, false).forward(&mut g, hv)?;
    Ok(g.value(out).clone())
}

/// Stage-1 connector outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Features {
    pub x_img: Tensor,
    pub x_t: Tensor,
    pub x_s: Tensor,
}

pub fn connector_stage1(h: &Tensor, task: &AdapterParams, client: &AdapterParams) -> Result<Stage1Features> {
    let x_t = adapter_forward(h, task)?;
    let x_s = adapter_forward(h, client)?;
    let x_img = x_t.add(&x_s)?;
    Ok(Stage1Features { x_img, x_t, x_s })
}

/// How a sample's `N` token scores become one routing distribution `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterPooling {
    /// Softmax of token-mean logits.
    #[default]
    MeanLogits,
    /// Token-mean of per-token softmax probabilities.
    MeanProbs,
}

/// Linear router `g = H W + b` over `T` adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl RouterParams {
    pub fn zeros(c_in: usize, tasks: usize) -> Result<Self> {
        if tasks < 2 {
            return Err(Error::Invalid(format!("a router needs at least 2 adapters, got {tasks}")));
        }
        Ok(Self { w: Tensor::zeros(&[c_in, tasks]), b: Tensor::zeros(&[tasks]) })
    }

    pub fn width(&self) -> usize {
        self.b.len()
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", self.w.clone());
        p.insert("b", self.b.clone());
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self { w: p.require("w")?.clone(), b: p.require("b")?.clone() })
    }
}

/// Router outputs for a batch of `B` samples of `N` tokens each.
#[derive(Debug, Clone, Copy)]
pub struct RoutingVars {
    /// `B×T` per-sample adapter probabilities.
    pub p: Var,
    /// `(B·N)×T` raw router logits.
    pub logits: Var,
    /// `(B·N)×T` per-token softmax.
    pub per_token: Var,
}

pub fn route(
    g: &mut Graph,
    h: Var,
    w: Var,
    b: Var,
    n_tokens: usize,
    pooling: RouterPooling,
) -> Result<RoutingVars> {
    if g.value(b).len() < 2 {
        return Err(Error::Invalid("a router needs at least 2 adapters".into()));
    }
    let logits = g.matmul(h, w)?;
    let logits = g.add_bias(logits, b)?;
    let per_token = g.softmax_rows(logits)?;
    let p = match pooling {
        RouterPooling::MeanLogits => {
            let pooled = g.group_mean(logits, n_tokens)?;
            g.softmax_rows(pooled)?
        }
        RouterPooling::MeanProbs => g.group_mean(per_token, n_tokens)?,
    };
    Ok(RoutingVars { p, logits, per_token })
}

/// Router outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub p: Tensor,
    pub logits: Tensor,
    pub per_token: Tensor,
}

pub fn router_forward(h: &Tensor, router: &RouterParams, pooling: RouterPooling) -> Result<Routing> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let w = g.constant(router.w.clone());
    let b = g.constant(router.b.clone());
    let r = route(&mut g, hv, w, b, h.rows(), pooling)?;
    Ok(Routing {
        p: Tensor::vector(g.value(r.p).data().to_vec()),
        logits: g.value(r.logits).clone(),
        per_token: g.value(r.per_token).clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossInit {
    /// Copy of the local task adapter.
    #[default]
    Local,
    Random,
}

/// Cross-task mixture of adapters. Slot 0 is the local task adapter; slot
/// `i ≥ 1` is the frozen adapter of `foreign_task_ids[i-1]` plus its
/// trainable cross adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtMoaModule {
    pub local_task_id: usize,
    pub local_adapter: AdapterParams,
    pub foreign_task_ids: Vec<usize>,
    pub foreign_adapters: Vec<AdapterParams>,
    /// Empty when cross adapters are disabled.
    pub cross_adapters: Vec<AdapterParams>,
    pub router: RouterParams,
}

impl CtMoaModule {
    pub fn tasks(&self) -> usize {
        self.foreign_adapters.len() + 1
    }

    pub fn has_cross(&self) -> bool {
        !self.cross_adapters.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tasks();
        if self.foreign_task_ids.len() != t - 1 {
            return Err(Error::Shape(format!(
                "{} foreign task ids for {} foreign adapters",
                self.foreign_task_ids.len(),
                t - 1
            )));
        }
        if self.has_cross() && self.cross_adapters.len() != t - 1 {
            return Err(Error::Shape(format!(
                "{} cross adapters for {} foreign adapters",
                self.cross_adapters.len(),
                t - 1
            )));
        }
        if self.router.width() != t {
            return Err(Error::Shape(format!("router width {} for {t} adapters", self.router.width())));
        }
        Ok(())
    }

    /// Trainable parameters: local adapter, cross adapters and router.
    pub fn trainable_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("local", &self.local_adapter.to_params());
        for (i, c) in self.cross_adapters.iter().enumerate() {
            p.extend_prefixed(&format!("cross{i}"), &c.to_params());
        }
        p.extend_prefixed("router", &self.router.to_params());
        p
    }

    pub fn set_trainable(&mut self, p: &ParamSet) -> Result<()> {
        self.local_adapter = AdapterParams::from_params(&p.strip_prefix("local"))?;
        for i in 0..self.cross_adapters.len() {
            self.cross_adapters[i] = AdapterParams::from_params(&p.strip_prefix(&format!("cross{i}")))?;
        }
        self.router = RouterParams::from_params(&p.strip_prefix("router"))?;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMoa {
        let local = self.local_adapter.bind(g, trainable);
        let foreign = self.foreign_adapters.iter().map(|a| a.bind(g, false)).collect();
        let cross = self.cross_adapters.iter().map(|a| a.bind(g, trainable)).collect();
        let (rw, rb) = if trainable {
            (g.param(self.router.w.clone()), g.param(self.router.b.clone()))
        } else {
            (g.constant(self.router.w.clone()), g.constant(self.router.b.clone()))
        };
        BoundMoa { local, foreign, cross, router_w: rw, router_b: rb }
    }
}

#[derive(Debug, Clone)]
pub struct BoundMoa {
    pub local: BoundAdapter,
    pub foreign: Vec<BoundAdapter>,
    pub cross: Vec<BoundAdapter>,
    pub router_w: Var,
    pub router_b: Var,
}

impl BoundMoa {
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = self.local.named("local");
        for (i, c) in self.cross.iter().enumerate() {
            out.extend(c.named(&format!("cross{i}")));
        }
        out.push(("router.b".into(), self.router_b));
        out.push(("router.w".into(), self.router_w));
        out
    }

    /// `x_t = P[0] ψ_local(H) + Σ_i P[i] (ψ_i(H) + ψ_i^c(H))`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        h: Var,
        routing: &RoutingVars,
        n_tokens: usize,
    ) -> Result<Var> {
        let p_tok = g.repeat_rows(routing.p, n_tokens)?;
        let mut terms = Vec::with_capacity(self.foreign.len() + 1);
        let local = self.local.forward(g, h)?;
        terms.push((g.mul_col(local, p_tok, 0)?, 1.0));
        for (i, f) in self.foreign.iter().enumerate() {
            let mut branch = f.forward(g, h)?;
            if let Some(c) = self.cross.get(i) {
                let cx = c.forward(g, h)?;
                branch = g.add(branch, cx)?;
            }
            terms.push((g.mul_col(branch, p_tok, i + 1)?, 1.0));
        }
        g.combine(&terms)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        h: Var,
        n_tokens: usize,
        pooling: RouterPooling,
    ) -> Result<(Var, RoutingVars)> {
        let routing = route(g, h, self.router_w, self.router_b, n_tokens, pooling)?;
        let x = self.forward_with(g, h, &routing, n_tokens)?;
        Ok((x, routing))
    }
}

/// Single-sample CT-MoA output together with its routing.
#[derive(Debug, Clone, PartialEq)]
pub struct MoaOutput {
    pub x_t: Tensor,
    pub routing: Routing,
}

pub fn ctmoa_forward(h: &Tensor, m: &CtMoaModule, pooling: RouterPooling) -> Result<MoaOutput> {
    m.validate()?;
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let bound = m.bind(&mut g, false);
    let (x, r) = bound.forward(&mut g, hv, h.rows(), pooling)?;
    Ok(MoaOutput {
        x_t: g.value(x).clone(),
        routing: Routing {
            p: Tensor::vector(g.value(r.p).data().to_vec()),
            logits: g.value(r.logits).clone(),
            per_token: g.value(r.per_token).clone(),
        },
    })
}

/// CT-MoA output under a caller-supplied `P` (length `T`).
pub fn ctmoa_forward_with_p(h: &Tensor, m: &CtMoaModule, p: &[f64]) -> Result<Tensor> {
    m.validate()?;
    if p.len() != m.tasks() {
        return Err(Error::Shape(format!("{} routing weights for {} adapters", p.len(), m.tasks())));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let bound = m.bind(&mut g, false);
    let pv = g.constant(Tensor::new(vec![1, p.len()], p.to_vec())?);
    let dummy = RoutingVars { p: pv, logits: pv, per_token: pv };
    let x = bound.forward_with(&mut g, hv, &dummy, h.rows())?;
    Ok(g.value(x).clone())
}

/// Fill (or clear) the cross adapters of `m`.
pub fn init_cross_task_adapters(
    m: &mut CtMoaModule,
    enabled: bool,
    mode: CrossInit,
    dims: &ModelDims,
    rng: &mut ChaCha8Rng,
) {
    let n = m.foreign_adapters.len();
    m.cross_adapters = if !enabled {
        Vec::new()
    } else {
        match mode {
            CrossInit::Local => vec![m.local_adapter.clone(); n],
            CrossInit::Random => (0..n).map(|_| AdapterParams::random(dims, rng)).collect(),
        }
    };
}

/// Low-rank update `(α/r)·A·B` on the frozen answer head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextAdapterParams {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl TextAdapterParams {
    /// `A` random, `B` zero, so the adapted head starts equal to the frozen one.
    pub fn init(dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: normal_tensor(rng, &[dims.c, dims.rank], (1.0 / dims.c as f64).sqrt()),
            b: Tensor::zeros(&[dims.rank, dims.vocab]),
            alpha: dims.alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", self.a.clone());
        p.insert("b", self.b.clone());
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        let a = p.require("a")?;
        let b = p.require("b")?;
        a.expect_same_shape(&self.a)?;
        b.expect_same_shape(&self.b)?;
        self.a = a.clone();
        self.b = b.clone();
        Ok(())
    }
}

/// Adapted head `W_head + (α/r)·A·B` on the graph.
pub fn bind_head(g: &mut Graph, backbone: &ToyBackbone, a: Var, b: Var, scale: f64) -> Result<Var> {
    let head = g.constant(backbone.token_head.clone());
    let ab = g.matmul(a, b)?;
    let ab = g.scale(ab, scale);
    g.add(head, ab)
}

/// Answer logits for one sample: pooled image tokens plus mean instruction
/// embedding, through the adapted head.
pub fn llm_forward(
    x_img: &Tensor,
    instruction: &[usize],
    backbone: &ToyBackbone,
    text: &TextAdapterParams,
) -> Result<Tensor> {
    if x_img.cols() != backbone.dims.c {
        return Err(Error::Shape(format!("image tokens {:?} vs hidden size {}", x_img.shape(), backbone.dims.c)));
    }
    let mut g = Graph::new();
    let x = g.constant(x_img.clone());
    let pooled = g.group_mean(x, x_img.rows())?;
    let ins = g.constant(Tensor::new(vec![1, backbone.dims.c], backbone.instruction_mean(instruction)?)?);
    let h = g.add(pooled, ins)?;
    let a = g.constant(text.a.clone());
    let b = g.constant(text.b.clone());
    let w = bind_head(&mut g, backbone, a, b, text.scale())?;
    let logits = g.matmul(h, w)?;
    Ok(Tensor::vector(g.value(logits).data().to_vec()))
}

/// The visual connector a client currently runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Connector {
    /// Stage-1 task adapter (also the degenerate one-task stage 2).
    Single(AdapterParams),
    Moa(CtMoaModule),
}

impl Connector {
    /// The adapter uploaded for task-aware aggregation.
    pub fn task_adapter(&self) -> &AdapterParams {
        match self {
            Connector::Single(a) => a,
            Connector::Moa(m) => &m.local_adapter,
        }
    }

    pub fn task_adapter_mut(&mut self) -> &mut AdapterParams {
        match self {
            Connector::Single(a) => a,
            Connector::Moa(m) => &mut m.local_adapter,
        }
    }
}

/// Everything one client trains or runs locally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub connector: Connector,
    /// Client-specific adapter; `None` in single-adapter mode.
    pub client_adapter: Option<AdapterParams>,
    /// Whether `client_adapter` contributes to the forward pass.
    pub use_client_adapter: bool,
    pub text: TextAdapterParams,
    pub pooling: RouterPooling,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMask {
    pub connector: bool,
    pub client_adapter: bool,
    pub text: bool,
}

/// A batch of encoded samples, rows grouped `N` at a time.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `(B·N)×C_in` encoded visual tokens.
    pub h: Tensor,
    /// `B×C` mean instruction embeddings.
    pub instr: Tensor,
    pub targets: Vec<usize>,
    pub n_tokens: usize,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Graph handles produced by one model forward pass.
#[derive(Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub x_t: Var,
    pub x_s: Option<Var>,
    pub routing: Option<RoutingVars>,
    /// Trainable leaves by prefixed parameter name.
    pub trainables: Vec<(String, Var)>,
}

impl ClientModel {
    pub fn trainable_params(&self, mask: TrainMask) -> ParamSet {
        let mut p = ParamSet::new();
        if mask.connector {
            match &self.connector {
                Connector::Single(a) => p.extend_prefixed("task", &a.to_params()),
                Connector::Moa(m) => p.extend_prefixed("moa", &m.trainable_params()),
            }
        }
        if mask.client_adapter {
            if let Some(c) = &self.client_adapter {
                p.extend_prefixed("client", &c.to_params());
            }
        }
        if mask.text {
            p.extend_prefixed("text", &self.text.to_params());
        }
        p
    }

    pub fn set_trainable(&mut self, p: &ParamSet, mask: TrainMask) -> Result<()> {
        if mask.connector {
            match &mut self.connector {
                Connector::Single(a) => *a = AdapterParams::from_params(&p.strip_prefix("task"))?,
                Connector::Moa(m) => m.set_trainable(&p.strip_prefix("moa"))?,
            }
        }
        if mask.client_adapter {
            if let Some(c) = &mut self.client_adapter {
                *c = AdapterParams::from_params(&p.strip_prefix("client"))?;
            }
        }
        if mask.text {
            self.text.set_params(&p.strip_prefix("text"))?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        backbone: &ToyBackbone,
        batch: &EncodedBatch,
        mask: TrainMask,
    ) -> Result<ForwardVars> {
        let mut trainables = Vec::new();
        let h = g.constant(batch.h.clone());
        let (x_t, routing) = match &self.connector {
            Connector::Single(a) => {
                let bound = a.bind(g, mask.connector);
                if mask.connector {
                    trainables.extend(bound.named("task"));
                }
                (bound.forward(g, h)?, None)
            }
            Connector::Moa(m) => {
                let bound = m.bind(g, mask.connector);
                if mask.connector {
                    trainables.extend(bound.named().into_iter().map(|(k, v)| (format!("moa.{k}"), v)));
                }
                let (x, r) = bound.forward(g, h, batch.n_tokens, self.pooling)?;
                (x, Some(r))
            }
        };
        let x_s = match (&self.client_adapter, self.use_client_adapter) {
            (Some(c), true) => {
                let train = mask.client_adapter;
                let bound = c.bind(g, train);
                if train {
                    trainables.extend(bound.named("client"));
                }
                Some(bound.forward(g, h)?)
            }
            _ => None,
        };
        let x_img = match x_s {
            Some(s) => g.add(x_t, s)?,
            None => x_t,
        };
        let pooled = g.group_mean(x_img, batch.n_tokens)?;
        let ins = g.constant(batch.instr.clone());
        let hid = g.add(pooled, ins)?;
        let (a, b) = if mask.text {
            let a = g.param(self.text.a.clone());
            let b = g.param(self.text.b.clone());
            trainables.push(("text.a".into(), a));
            trainables.push(("text.b".into(), b));
            (a, b)
        } else {
            (g.constant(self.text.a.clone()), g.constant(self.text.b.clone()))
        };
        let w = bind_head(g, backbone, a, b, self.text.scale())?;
        let logits = g.matmul(hid, w)?;
        Ok(ForwardVars { logits, x_t, x_s, routing, trainables })
    }

    /// Argmax answer for every sample of the batch.
    pub fn predict(&self, backbone: &ToyBackbone, batch: &EncodedBatch) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let none = TrainMask { connector: false, client_adapter: false, text: false };
        let out = self.forward(&mut g, backbone, batch, none)?;
        let logits = g.value(out.logits);
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Mean over samples of the mean squared cosine between every column of
/// `x_t` and every column of `x_s` (per-sample `N×C` blocks).
pub fn mean_squared_column_cosine(x_t: &Tensor, x_s: &Tensor, n_tokens: usize) -> Result<f64> {
    x_t.expect_same_shape(x_s)?;
    let (r, c) = x_t.dims2();
    if n_tokens == 0 || r % n_tokens != 0 {
        return Err(Error::Shape(format!("{r} rows do not split into samples of {n_tokens}")));
    }
    let samples = r / n_tokens;
    let mut total = 0.0;
    for s in 0..samples {
        let rows = s * n_tokens..(s + 1) * n_tokens;
        for a in 0..c {
            for b in 0..c {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for row in rows.clone() {
                    let (u, v) = (x_t.at(row, a), x_s.at(row, b));
                    dot += u * v;
                    na += u * u;
                    nb += v * v;
                }
                let denom = (na * nb).sqrt();
                if denom > 0.0 {
                    total += (dot / denom).powi(2);
                }
            }
        }
    }
    Ok(total / (samples * c * c) as f64)
}
