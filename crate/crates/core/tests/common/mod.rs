#![allow(dead_code)]

use pilot_core::model::{
    AdapterParams, ClientModel, Connector, CtMoaModule, EncodedBatch, ModelDims, RouterParams, RouterPooling,
    TextAdapterParams, ToyBackbone, TrainMask,
};
use pilot_core::numerics::Graph;
use pilot_core::losses::{stage1_objective, stage2_objective};
use pilot_core::{ParamSet, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| { let z: f64 = StandardNormal.sample(r); std * z }).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// An adapter with every tensor (biases too) drawn at random.
pub fn dense_adapter(dims: &ModelDims, r: &mut ChaCha8Rng) -> AdapterParams {
    AdapterParams {
        w1: gaussian(r, &[dims.c_in, dims.c_hid], 0.3),
        b1: gaussian(r, &[dims.c_hid], 0.1),
        w2: gaussian(r, &[dims.c_hid, dims.c], 0.3),
        b2: gaussian(r, &[dims.c], 0.1),
    }
}

pub fn dense_text(dims: &ModelDims, r: &mut ChaCha8Rng) -> TextAdapterParams {
    TextAdapterParams { a: gaussian(r, &[dims.c, dims.rank], 0.3), b: gaussian(r, &[dims.rank, dims.vocab], 0.3), alpha: dims.alpha }
}

pub fn random_batch(dims: &ModelDims, samples: usize, r: &mut ChaCha8Rng) -> EncodedBatch {
    EncodedBatch {
        h: gaussian(r, &[samples * dims.n_tokens, dims.c_in], 1.0),
        instr: gaussian(r, &[samples, dims.c], 0.5),
        targets: (0..samples).map(|_| r.gen_range(0..dims.vocab)).collect(),
        n_tokens: dims.n_tokens,
    }
}

pub fn stage1_model(dims: &ModelDims, r: &mut ChaCha8Rng) -> ClientModel {
    ClientModel {
        connector: Connector::Single(dense_adapter(dims, r)),
        client_adapter: Some(dense_adapter(dims, r)),
        use_client_adapter: true,
        text: dense_text(dims, r),
        pooling: RouterPooling::MeanLogits,
    }
}

pub fn stage2_model(dims: &ModelDims, tasks: usize, r: &mut ChaCha8Rng) -> ClientModel {
    let mut router = RouterParams::zeros(dims.c_in, tasks).unwrap();
    router.w = gaussian(r, &[dims.c_in, tasks], 0.5);
    router.b = gaussian(r, &[tasks], 0.5);
    let moa = CtMoaModule {
        local_task_id: 0,
        local_adapter: dense_adapter(dims, r),
        foreign_task_ids: (1..tasks).collect(),
        foreign_adapters: (1..tasks).map(|_| dense_adapter(dims, r)).collect(),
        cross_adapters: (1..tasks).map(|_| dense_adapter(dims, r)).collect(),
        router,
    };
    ClientModel {
        connector: Connector::Moa(moa),
        client_adapter: Some(dense_adapter(dims, r)),
        use_client_adapter: true,
        text: dense_text(dims, r),
        pooling: RouterPooling::MeanLogits,
    }
}

pub fn backbone(dims: ModelDims, seed: u64) -> ToyBackbone {
    ToyBackbone::new(dims, &mut rng(seed))
}

/// The composite training objective of the model's stage and its gradient
/// with respect to the trainables selected by `mask`.
pub fn objective(
    model: &ClientModel,
    backbone: &ToyBackbone,
    batch: &EncodedBatch,
    mask: TrainMask,
    lambdas: (f64, f64, f64),
) -> Result<(f64, ParamSet)> {
    let mut g = Graph::new();
    let fv = model.forward(&mut g, backbone, batch, mask)?;
    let ce = g.cross_entropy(fv.logits, &batch.targets)?;
    let obj = match &fv.routing {
        None => stage1_objective(&mut g, ce, fv.x_t, fv.x_s, batch.n_tokens, lambdas.0)?,
        Some(r) => stage2_objective(&mut g, ce, Some((r.per_token, r.logits)), lambdas.1, lambdas.2)?,
    };
    let value = g.value(obj.total).item();
    let grads = g.backward(obj.total)?;
    Ok((value, fv.trainables.iter().map(|(n, v)| (n.clone(), grads.wrt(*v))).collect()))
}

pub fn value_at(
    model: &ClientModel,
    backbone: &ToyBackbone,
    batch: &EncodedBatch,
    mask: TrainMask,
    lambdas: (f64, f64, f64),
    p: &ParamSet,
) -> Result<f64> {
    let mut m = model.clone();
    m.set_trainable(p, mask)?;
    objective(&m, backbone, batch, mask, lambdas).map(|x| x.0)
}

pub mod oracle {
    //! Plain-loop transcriptions of the aggregation rules over flat vectors.

    use std::collections::BTreeMap;

    use pilot_core::aggregation::{
        adaptive_text_aggregate, euclidean_distance, fedavg_aggregate, select_neighbors, task_aware_aggregate,
        ClientUpdate, NeighborWeighting,
    };
    use pilot_core::losses::Stage;
    use pilot_core::ParamSet;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::gaussian;

    pub fn random_updates(r: &mut ChaCha8Rng) -> Vec<ClientUpdate> {
        let k = r.gen_range(2..=9);
        let t = r.gen_range(1..=k.min(4));
        let mut ids: Vec<usize> = (0..k).collect();
        // shuffled order so implementations cannot lean on arrival order
        for i in (1..k).rev() {
            ids.swap(i, r.gen_range(0..=i));
        }
        ids.iter()
            .map(|&id| {
                let mut v = ParamSet::new();
                v.insert("w", gaussian(r, &[2, 3], 1.0));
                v.insert("b", gaussian(r, &[3], 1.0));
                let mut x = ParamSet::new();
                x.insert("a", gaussian(r, &[3, 2], 1.0));
                x.insert("b", gaussian(r, &[2, 2], 1.0));
                ClientUpdate {
                    client_id: id,
                    task_id: id % t,
                    sample_count: r.gen_range(1..60),
                    visual_params: v,
                    text_params: x,
                    round: 1,
                    stage: Stage::One,
                }
            })
            .collect()
    }

    fn flat(p: &ParamSet) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in p.iter() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    pub fn average(members: &[(&[f64], usize)]) -> Vec<f64> {
        let total: usize = members.iter().map(|m| m.1).sum();
        let mut num = vec![0.0; members[0].0.len()];
        for (x, n) in members {
            for i in 0..num.len() {
                num[i] += *n as f64 * x[i];
            }
        }
        num.iter().map(|v| v / total as f64).collect()
    }

    pub fn distance(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s.sqrt()
    }

    /// Result and coefficients `(own, [(neighbor, coefficient)])` for client `k`.
    pub fn adaptive(
        ids: &[usize],
        xs: &[Vec<f64>],
        ns: &[usize],
        k: usize,
        m: usize,
        as_written: bool,
    ) -> (Vec<f64>, f64, Vec<(usize, f64)>) {
        let me = ids.iter().position(|&i| i == k).unwrap();
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for j in 0..ids.len() {
            if j != me {
                cand.push((distance(&xs[me], &xs[j]), ids[j], j));
            }
        }
        // selection sort by (distance, id)
        let mut chosen = Vec::new();
        while chosen.len() < m && !cand.is_empty() {
            let mut best = 0;
            for c in 1..cand.len() {
                if cand[c].0 < cand[best].0 || (cand[c].0 == cand[best].0 && cand[c].1 < cand[best].1) {
                    best = c;
                }
            }
            chosen.push(cand.remove(best));
        }
        let zeros = chosen.iter().filter(|c| c.0 == 0.0).count();
        let w: Vec<f64> = if zeros > 0 {
            chosen.iter().map(|c| if c.0 == 0.0 { 1.0 / zeros as f64 } else { 0.0 }).collect()
        } else {
            let s: f64 = chosen.iter().map(|c| 1.0 / c.0).sum();
            chosen.iter().map(|c| (1.0 / c.0) / s).collect()
        };
        let denom = ns[me] as f64 + chosen.iter().map(|c| ns[c.2] as f64).sum::<f64>();
        let mut own = ns[me] as f64 / denom;
        let mut coefs: Vec<f64> = chosen.iter().zip(&w).map(|(c, w)| ns[c.2] as f64 * w / denom).collect();
        if !as_written {
            let s = own + coefs.iter().sum::<f64>();
            own /= s;
            for c in &mut coefs {
                *c /= s;
            }
        }
        let mut out = vec![0.0; xs[me].len()];
        for i in 0..out.len() {
            out[i] = own * xs[me][i];
            for (c, coef) in chosen.iter().zip(&coefs) {
                out[i] += coef * xs[c.2][i];
            }
        }
        (out, own, chosen.iter().zip(coefs).map(|(c, coef)| (c.1, coef)).collect())
    }

    fn inside(out: &[f64], inputs: &[&[f64]]) -> bool {
        (0..out.len()).all(|i| {
            let lo = inputs.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min);
            let hi = inputs.iter().map(|x| x[i]).fold(f64::NEG_INFINITY, f64::max);
            out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12
        })
    }

    #[derive(Debug, Default)]
    pub struct OracleReport {
        pub instances: usize,
        /// Largest absolute deviation from the loop transcriptions.
        pub max_error: f64,
        /// Largest |Σ w - 1| over the normalized inverse-distance weights.
        pub max_weight_sum_error: f64,
        pub envelope_violations: usize,
    }

    pub fn compare(seed: u64, instances: usize) -> OracleReport {
        let mut r = super::rng(seed);
        let mut rep = OracleReport { instances, ..Default::default() };
        for _ in 0..instances {
            let ups = random_updates(&mut r);
            let mut err: f64 = 0.0;

            // FedAvg over every client
            let vis: Vec<Vec<f64>> = ups.iter().map(|u| flat(&u.visual_params)).collect();
            let txt: Vec<Vec<f64>> = ups.iter().map(|u| flat(&u.text_params)).collect();
            let ns: Vec<usize> = ups.iter().map(|u| u.sample_count).collect();
            let ids: Vec<usize> = ups.iter().map(|u| u.client_id).collect();
            let all: Vec<(&[f64], usize)> = vis.iter().map(|v| v.as_slice()).zip(ns.iter().copied()).collect();
            let fed = flat(&fedavg_aggregate(&ups, |u| &u.visual_params).unwrap());
            err = err.max(max_diff(&fed, &average(&all)));
            if !inside(&fed, &vis.iter().map(|v| v.as_slice()).collect::<Vec<_>>()) {
                rep.envelope_violations += 1;
            }

            // task-aware average
            let got = task_aware_aggregate(&ups).unwrap();
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, u) in ups.iter().enumerate() {
                groups.entry(u.task_id).or_default().push(i);
            }
            assert_eq!(got.len(), groups.len());
            for (t, members) in &groups {
                let m: Vec<(&[f64], usize)> = members.iter().map(|&i| (vis[i].as_slice(), ns[i])).collect();
                let g = flat(&got[t]);
                err = err.max(max_diff(&g, &average(&m)));
                if !inside(&g, &m.iter().map(|x| x.0).collect::<Vec<_>>()) {
                    rep.envelope_violations += 1;
                }
            }

            // distances and neighbour choice
            let sets: Vec<(usize, &ParamSet)> = ups.iter().map(|u| (u.client_id, &u.text_params)).collect();
            for i in 0..ups.len() {
                for j in 0..ups.len() {
                    let d = euclidean_distance(&ups[i].text_params, &ups[j].text_params).unwrap();
                    err = err.max((d - distance(&txt[i], &txt[j])).abs());
                }
            }
            let m = r.gen_range(1..ups.len().max(2));
            for &k in &ids {
                let picked = select_neighbors(k, &sets, m).unwrap();
                let (_, _, want) = adaptive(&ids, &txt, &ns, k, m, true);
                assert_eq!(picked.iter().map(|p| p.0).collect::<Vec<_>>(), want.iter().map(|w| w.0).collect::<Vec<_>>());
            }

            for mode in [NeighborWeighting::AsWritten, NeighborWeighting::Renormalized] {
                let aw = mode == NeighborWeighting::AsWritten;
                let (out, report) = adaptive_text_aggregate(&ups, m, mode).unwrap();
                for c in &report.clients {
                    let (want, own, coefs) = adaptive(&ids, &txt, &ns, c.client_id, m, aw);
                    let got = flat(&out[&c.client_id]);
                    err = err.max(max_diff(&got, &want));
                    err = err.max((c.own_coefficient - own).abs());
                    for (n, (id, coef)) in c.neighbors.iter().zip(&coefs) {
                        assert_eq!(n.client_id, *id);
                        err = err.max((n.coefficient - coef).abs());
                    }
                    let wsum: f64 = c.neighbors.iter().map(|n| n.weight).sum();
                    rep.max_weight_sum_error = rep.max_weight_sum_error.max((wsum - 1.0).abs());
                    if !aw {
                        let mut inputs = vec![txt[ids.iter().position(|&i| i == c.client_id).unwrap()].as_slice()];
                        for n in &c.neighbors {
                            inputs.push(txt[ids.iter().position(|&i| i == n.client_id).unwrap()].as_slice());
                        }
                        if !inside(&got, &inputs) {
                            rep.envelope_violations += 1;
                        }
                    }
                }
            }
            rep.max_error = rep.max_error.max(err);
        }
        rep
    }
}
