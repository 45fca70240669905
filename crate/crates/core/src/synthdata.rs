//! Synthetic federation: K client shards over T tasks that share a frozen
//! vision stub but disagree on how pooled visual features map to answers.
//!
//! Raw token features are `noise + task shift + heterogeneity * client shift`.
//! Each task's answer map is `G_t (W_head + E_t)` with a random connector-side
//! factor `G_t` and a low-rank head-side deviation `E_t`, so recovering a task
//! needs both the visual connector and the text adapter. A client may perturb
//! `G_t` privately (`client_map`). Answers are the argmax of the mapped pooled
//! features plus Gumbel noise.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normal_tensor, ToyBackbone};
use crate::numerics::Tensor;
use crate::seeding::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Norm of each (mutually orthogonal) task offset.
    pub task_shift: f64,
    /// Norm of a client offset at heterogeneity 1.
    pub client_shift: f64,
    /// Gumbel noise scale on the answer logits.
    pub temperature: f64,
    /// Standard deviation of the noiseless answer logits.
    pub signal: f64,
    /// Rank of the head-side part of each task map.
    pub head_rank: usize,
    /// Strength of the head-side part relative to the frozen head.
    pub head_weight: f64,
    /// Fraction of the connector-side factor shared by all tasks.
    pub shared_visual: f64,
    /// Fraction of the head-side part shared by all tasks.
    pub shared_head: f64,
    /// Relative size of a client's private perturbation of the connector-side
    /// factor at heterogeneity 1.
    pub client_map: f64,
    pub instruction_len: usize,
    pub eval_fraction: f64,
    /// Generation fails if two task maps correlate more than this.
    pub max_task_correlation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task_shift: 1.0,
            client_shift: 1.0,
            temperature: 0.5,
            signal: 3.0,
            head_rank: 4,
            head_weight: 1.0,
            shared_visual: 0.0,
            shared_head: 0.0,
            client_map: 0.0,
            instruction_len: 3,
            eval_fraction: 0.1,
            max_task_correlation: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// `C_in×V` map from pooled visual features to answer logits.
    pub mapping: Tensor,
    /// `D_raw` offset added to every token of this task.
    pub shift: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `N×D_raw` raw token features.
    pub features: Tensor,
    pub instruction: Vec<usize>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub task_id: usize,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl ClientShard {
    pub fn n_k(&self) -> usize {
        self.samples.len()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let Some(s) = self.samples.iter().find(|s| s.answer >= vocab) {
            return Err(Error::Data(format!("answer {} outside vocabulary {vocab}", s.answer)));
        }
        let n = self.samples.len();
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.eval) {
            if i >= n || seen[i] {
                return Err(Error::Data(format!("client {}: split index {i} repeated or out of range", self.client_id)));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub tasks: Vec<TaskSpec>,
    pub shards: Vec<ClientShard>,
}

/// Task of client `k` under round-robin assignment.
pub fn task_of(client: usize, tasks: usize) -> usize {
    client % tasks
}

pub fn generate_federation(
    seed: u64,
    clients: usize,
    tasks: usize,
    sizes: &[usize],
    heterogeneity: f64,
    cfg: &SynthConfig,
    backbone: &ToyBackbone,
) -> Result<Federation> {
    let dims = backbone.dims;
    let mut problems = Vec::new();
    if tasks == 0 {
        problems.push("at least one task is required".to_string());
    }
    if clients < tasks {
        problems.push(format!("{clients} clients cannot cover {tasks} tasks"));
    }
    if sizes.len() != clients {
        problems.push(format!("{} shard sizes given for {clients} clients", sizes.len()));
    }
    if let Some((k, n)) = sizes.iter().enumerate().find(|(_, &n)| n < 2) {
        problems.push(format!("client {k} has {n} samples; at least 2 are needed for an eval split"));
    }
    if !(0.0..=1.0).contains(&heterogeneity) {
        problems.push(format!("heterogeneity {heterogeneity} outside [0, 1]"));
    }
    if tasks > dims.d_raw {
        problems.push(format!("{tasks} orthogonal task shifts do not fit in {} raw dims", dims.d_raw));
    }
    for (name, v) in [("shared visual", cfg.shared_visual), ("shared head", cfg.shared_head)] {
        if !(0.0..=1.0).contains(&v) {
            problems.push(format!("{name} fraction {v} outside [0, 1]"));
        }
    }
    if !(0.0..1.0).contains(&cfg.eval_fraction) {
        problems.push(format!("eval fraction {} outside [0, 1)", cfg.eval_fraction));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let mut trng = seeding::rng(seed, Purpose::Tasks, 0);
    let shifts = orthonormal_rows(&mut trng, tasks, dims.d_raw);
    let g_std = (1.0 / dims.c_in as f64).sqrt();
    let shared = normal_tensor(&mut trng, &[dims.c_in, dims.c], g_std);
    let low_rank = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let u = normal_tensor(rng, &[dims.c, cfg.head_rank], (1.0 / cfg.head_rank as f64).sqrt());
        let v = normal_tensor(rng, &[cfg.head_rank, dims.vocab], (1.0 / dims.c as f64).sqrt());
        u.matmul(&v)
    };
    let use_head = cfg.head_rank > 0 && cfg.head_weight > 0.0;
    let shared_delta = if use_head { Some(low_rank(&mut trng)?) } else { None };
    let mut specs = Vec::with_capacity(tasks);
    let mut factors = Vec::with_capacity(tasks);
    for (t, dir) in shifts.into_iter().enumerate() {
        let shift = Tensor::vector(dir.iter().map(|v| v * cfg.task_shift).collect());
        let own = normal_tensor(&mut trng, &[dims.c_in, dims.c], g_std);
        let rho = cfg.shared_visual;
        let g = shared.scale(rho.sqrt()).add(&own.scale((1.0 - rho).sqrt()))?;
        let head = if let Some(sd) = &shared_delta {
            let own = low_rank(&mut trng)?;
            let delta = sd.scale(cfg.shared_head.sqrt()).add(&own.scale((1.0 - cfg.shared_head).sqrt()))?;
            let scale = cfg.head_weight * (backbone.token_head.norm_sq() / delta.norm_sq()).sqrt();
            backbone.token_head.add(&delta.scale(scale))?
        } else {
            backbone.token_head.clone()
        };
        let raw_map = g.matmul(&head)?;
        specs.push(TaskSpec { task_id: t, mapping: raw_map, shift });
        factors.push((g, head));
    }
    for (spec, f) in specs.iter_mut().zip(&mut factors) {
        let mut rrng = seeding::rng(seed, Purpose::Tasks, 1 + spec.task_id as u64);
        let zero = vec![0.0; dims.d_raw];
        let pooled: Vec<Vec<f64>> = (0..256)
            .map(|_| {
                let raw = draw_features(&mut rrng, dims.n_tokens, spec.shift.data(), &zero);
                pooled_visual(backbone, &raw)
            })
            .collect::<Result<_>>()?;
        let z = Tensor::from_rows(&pooled)?.matmul(&spec.mapping)?;
        let mean = z.sum() / z.len() as f64;
        let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        spec.mapping = spec.mapping.scale(cfg.signal / std);
        f.1 = f.1.scale(cfg.signal / std);
    }
    for a in 0..tasks {
        for b in a + 1..tasks {
            let c = mapping_correlation(&specs[a].mapping, &specs[b].mapping);
            if c.abs() > cfg.max_task_correlation {
                return Err(Error::Data(format!("tasks {a} and {b} correlate at {c:.3}")));
            }
        }
    }

    let mut shards = Vec::with_capacity(clients);
    for (k, &n) in sizes.iter().enumerate() {
        let t = task_of(k, tasks);
        let mut crng = seeding::rng(seed, Purpose::ClientShift, k as u64);
        let dir = orthonormal_rows(&mut crng, 1, dims.d_raw).remove(0);
        let client_shift: Vec<f64> = dir.iter().map(|v| v * cfg.client_shift * heterogeneity).collect();
        let strength = cfg.client_map * heterogeneity;
        let mapping = if strength > 0.0 {
            let (g, head) = &factors[t];
            let delta = normal_tensor(&mut crng, &[dims.c_in, dims.c], 1.0);
            let delta = delta.scale(strength * (g.norm_sq() / delta.norm_sq()).sqrt());
            g.add(&delta)?.matmul(head)?
        } else {
            specs[t].mapping.clone()
        };
        let mut srng = seeding::rng(seed, Purpose::Samples, k as u64);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = draw_features(&mut srng, dims.n_tokens, specs[t].shift.data(), &client_shift);
            let pooled = pooled_visual(backbone, &raw)?;
            let z = Tensor::new(vec![1, dims.c_in], pooled)?.matmul(&mapping)?;
            let answer = argmax_with_gumbel(&mut srng, z.data(), cfg.temperature);
            let instruction = (0..cfg.instruction_len).map(|_| srng.gen_range(0..dims.ins_vocab)).collect();
            samples.push(Sample { features: raw, instruction, answer });
        }
        let mut split_rng = seeding::rng(seed, Purpose::Split, k as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut split_rng);
        let n_eval = ((n as f64 * cfg.eval_fraction).round() as usize).clamp(1, n - 1);
        let mut eval = order[..n_eval].to_vec();
        let mut train = order[n_eval..].to_vec();
        eval.sort_unstable();
        train.sort_unstable();
        shards.push(ClientShard { client_id: k, task_id: t, samples, train, eval });
    }
    Ok(Federation { tasks: specs, shards })
}

fn draw_features(rng: &mut ChaCha8Rng, n_tokens: usize, task: &[f64], client: &[f64]) -> Tensor {
    let d = task.len();
    let mut t = normal_tensor(rng, &[n_tokens, d], 1.0);
    for row in t.data_mut().chunks_mut(d) {
        for ((x, a), b) in row.iter_mut().zip(task).zip(client) {
            *x += a + b;
        }
    }
    t
}

/// Token-mean of the frozen visual encoding.
pub fn pooled_visual(backbone: &ToyBackbone, raw: &Tensor) -> Result<Vec<f64>> {
    let h = backbone.vision_encode(raw)?;
    let (n, c) = h.dims2();
    let mut out = vec![0.0; c];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v / n as f64;
        }
    }
    Ok(out)
}

fn argmax_with_gumbel(rng: &mut ChaCha8Rng, z: &[f64], temperature: f64) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in z.iter().enumerate() {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let noisy = v - temperature * (-u.ln()).ln();
        if noisy > best_v {
            best_v = noisy;
            best = j;
        }
    }
    best
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = normal_tensor(rng, &[dim], 1.0).into_data();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Cosine between two centred, flattened maps.
pub fn mapping_correlation(a: &Tensor, b: &Tensor) -> f64 {
    let ca = centred(a.data());
    let cb = centred(b.data());
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let na = ca.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn centred(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// Iterates shard indices in shuffled order, reshuffling at every epoch
/// boundary from `(seed, epoch)` alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub seed: u64,
    pub stream: u64,
    pub epoch: u64,
    pub cursor: usize,
    indices: Vec<usize>,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, seed: u64, stream: u64) -> Self {
        let mut s = Self { seed, stream, epoch: 0, cursor: 0, indices, order: Vec::new() };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = seeding::rng(self.seed, Purpose::Batches, (self.stream << 20) ^ self.epoch);
        self.order = self.indices.clone();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Next batch of up to `size` indices; the last batch of an epoch may be
    /// short. Crossing the boundary reshuffles for the next epoch.
    pub fn sample_batch(&mut self, size: usize) -> Result<Vec<usize>> {
        if size == 0 || size > self.indices.len() {
            return Err(Error::Invalid(format!(
                "batch size {size} needs 1..={} training samples",
                self.indices.len()
            )));
        }
        let end = (self.cursor + size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        Ok(batch)
    }

    /// All batches of one full epoch starting at the current position.
    pub fn epoch_batches(&mut self, size: usize) -> Result<Vec<Vec<usize>>> {
        let start = self.epoch;
        let mut out = Vec::new();
        while self.epoch == start {
            out.push(self.sample_batch(size)?);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    client_id: usize,
    task_id: usize,
    index: usize,
    split: String,
    shape: Vec<usize>,
    features: Vec<f64>,
    instruction: Vec<usize>,
    answer: usize,
}

/// One JSON object per sample.
pub fn export_shard(shard: &ClientShard, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut is_eval = vec![false; shard.n_k()];
    shard.eval.iter().for_each(|&i| is_eval[i] = true);
    for (i, s) in shard.samples.iter().enumerate() {
        let line = SampleLine {
            client_id: shard.client_id,
            task_id: shard.task_id,
            index: i,
            split: if is_eval[i] { "eval" } else { "train" }.into(),
            shape: s.features.shape().to_vec(),
            features: s.features.data().to_vec(),
            instruction: s.instruction.clone(),
            answer: s.answer,
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn import_shard(path: impl AsRef<Path>) -> Result<ClientShard> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut shard: Option<ClientShard> = None;
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: SampleLine = serde_json::from_str(&line)?;
        let sh = shard.get_or_insert_with(|| ClientShard {
            client_id: l.client_id,
            task_id: l.task_id,
            samples: Vec::new(),
            train: Vec::new(),
            eval: Vec::new(),
        });
        if l.client_id != sh.client_id || l.task_id != sh.task_id || l.index != sh.samples.len() {
            return Err(Error::Data(format!("line {}: sample out of sequence", n + 1)));
        }
        match l.split.as_str() {
            "train" => sh.train.push(l.index),
            "eval" => sh.eval.push(l.index),
            other => return Err(Error::Data(format!("line {}: unknown split {other}", n + 1))),
        }
        sh.samples.push(Sample {
            features: Tensor::new(l.shape, l.features)?,
            instruction: l.instruction,
            answer: l.answer,
        });
    }
    shard.ok_or_else(|| Error::Data("empty shard file".into()))
}
