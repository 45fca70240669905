use pilot_core::aggregation::ClientUpdate;
use pilot_core::checkpoint::Checkpoint;
use pilot_core::config::{FederationConfig, Strategy, TextAgg};
use pilot_core::losses::{dispatch_fractions, Stage};
use pilot_core::model::{router_forward, AdapterParams, Connector};
use pilot_core::protocol::{
    backbone_for, check_payload, client_local_stage1, client_local_stage2, evaluate_client, federation_for,
    initial_model, run_federation, server_aggregate_and_broadcast, ClientState, FederationRun, LocalSettings,
    RoundMessage, ServerSettings, ServerState,
};
use pilot_core::seeding::{self, Purpose};
use pilot_core::{ParamSet, Tensor};
use rand::Rng;

fn small() -> FederationConfig {
    FederationConfig {
        samples_per_client: 40,
        lr_stage1: 0.01,
        lr_stage2: 0.01,
        batch_size: 8,
        write_checkpoints: false,
        ..FederationConfig::default()
    }
}

fn bits(p: &ParamSet) -> Vec<(String, Vec<u64>)> {
    p.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn settings(cfg: &FederationConfig, epochs: usize, lambdas: (f64, f64, f64), round: usize) -> LocalSettings {
    LocalSettings { epochs, batch_size: cfg.batch_size, lr: cfg.lr_stage2, lambdas, round }
}

/// Clients right after the stage-1 round and the switch to stage 2.
fn after_transition(cfg: &FederationConfig) -> FederationRun {
    let one = FederationConfig { rounds: 1, ..cfg.clone() };
    let run = run_federation(&one).unwrap();
    assert!(run.clients.iter().all(|c| c.stage == Stage::Two));
    run
}

#[test]
fn stage2_leaves_foreign_and_client_adapters_untouched() {
    let cfg = small();
    let mut run = after_transition(&cfg);
    let bb = run.backbone.clone();
    for c in run.clients.iter_mut().take(3) {
        let before = c.model.clone();
        let Connector::Moa(m0) = &before.connector else { panic!("expected a mixture connector") };
        client_local_stage2(c, &bb, &settings(&cfg, 2, cfg.effective_lambdas(), 2)).unwrap();
        let Connector::Moa(m1) = &c.model.connector else { unreachable!() };
        for (a, b) in m0.foreign_adapters.iter().zip(&m1.foreign_adapters) {
            assert_eq!(bits(&a.to_params()), bits(&b.to_params()));
        }
        let s0 = before.client_adapter.as_ref().unwrap().to_params();
        let s1 = c.model.client_adapter.as_ref().unwrap().to_params();
        assert_eq!(bits(&s0), bits(&s1));
        assert_ne!(m0.local_adapter, m1.local_adapter);
        assert_ne!(m0.router, m1.router);
        assert_ne!(m0.cross_adapters, m1.cross_adapters);
        assert_ne!(before.text, c.model.text);
    }
}

#[test]
fn uploads_carry_only_task_and_text_adapters() {
    let cfg = small();
    let mut run = after_transition(&cfg);
    let bb = run.backbone.clone();
    let c = &mut run.clients[0];
    let out = client_local_stage2(c, &bb, &settings(&cfg, 1, cfg.effective_lambdas(), 2)).unwrap();
    let msg = RoundMessage::upload(&out.update);
    check_payload(&msg).unwrap();
    let m = msg.manifest().unwrap();
    assert!(m.entries.iter().all(|e| e.name.starts_with("visual.") || e.name.starts_with("text.")));
    let scalars: usize = m.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    assert_eq!(scalars, out.update.visual_params.num_scalars() + out.update.text_params.num_scalars());
    let Connector::Moa(moa) = &c.model.connector else { unreachable!() };
    assert_eq!(bits(&out.update.visual_params), bits(&moa.local_adapter.to_params()));

    // a client adapter smuggled into an upload is rejected
    let mut p = ParamSet::new();
    p.extend_prefixed("visual", &out.update.visual_params);
    p.extend_prefixed("client", &c.model.client_adapter.as_ref().unwrap().to_params());
    let bad = RoundMessage { bytes: Checkpoint::new(p).encode(), ..msg.clone() };
    assert!(check_payload(&bad).is_err());
    let mut q = ParamSet::new();
    q.insert("text.sample_features", Tensor::zeros(&[2]));
    let bad = RoundMessage { bytes: Checkpoint::new(q).encode(), ..msg };
    assert!(check_payload(&bad).is_err());
}

#[test]
fn byte_accounting_matches_serialized_uploads() {
    let cfg = FederationConfig { rounds: 2, ..small() };
    let run = run_federation(&cfg).unwrap();
    let per_client: usize = {
        let init = initial_model(&cfg, &run.backbone);
        let u = ClientUpdate {
            client_id: 0,
            task_id: 0,
            sample_count: run.clients[0].sample_count(),
            visual_params: init.connector.task_adapter().to_params(),
            text_params: init.text.to_params(),
            round: 1,
            stage: Stage::One,
        };
        RoundMessage::upload(&u).size()
    };
    let mut total = 0;
    for r in &run.history.rounds {
        for c in &r.clients {
            // ids and counts are single digits here, so every upload has the same length
            assert_eq!(c.bytes_up, per_client, "round {} client {}", r.round, c.client);
            assert!(c.bytes_down > c.bytes_up);
            total += c.bytes_up;
        }
    }
    assert_eq!(run.history.total_bytes_up(), total);

    let local = run_federation(&FederationConfig { strategy: Strategy::LocalOnly, ..cfg }).unwrap();
    assert_eq!(local.history.total_bytes_up(), 0);
    assert!(local.history.rounds.iter().flat_map(|r| &r.clients).all(|c| c.bytes_down == 0));
}

#[test]
fn default_scenario_runs_one_stage1_round_then_stage2() {
    let cfg = FederationConfig { write_checkpoints: false, ..FederationConfig::default() };
    let run = run_federation(&cfg).unwrap();
    assert_eq!(run.history.rounds.len(), 3);
    assert_eq!(run.history.stage_tags(), vec![1, 2, 2]);
    for r in &run.history.rounds {
        assert_eq!(r.clients.len(), 9);
        assert!(r.clients.iter().all(|c| (0.0..=1.0).contains(&c.accuracy)));
    }
    let b = run.server.task_adapters.len();
    assert_eq!(b, 3);
}

#[test]
fn threaded_and_serial_runs_are_bit_identical() {
    let cfg = FederationConfig { write_checkpoints: true, ..small() };
    let a = run_federation(&FederationConfig { parallel: true, ..cfg.clone() }).unwrap();
    let b = run_federation(&FederationConfig { parallel: false, ..cfg }).unwrap();
    let mut ja: serde_json::Value = serde_json::from_str(&a.history.to_json().unwrap()).unwrap();
    let mut jb: serde_json::Value = serde_json::from_str(&b.history.to_json().unwrap()).unwrap();
    // the run id hashes the config, thread flag included
    for j in [&mut ja, &mut jb] {
        j["config"]["parallel"] = serde_json::Value::Null;
        j["run_id"] = serde_json::Value::Null;
    }
    assert_eq!(ja, jb);
    assert_eq!(a.history.to_csv().unwrap(), b.history.to_csv().unwrap());
    assert_eq!(a.checkpoints.len(), b.checkpoints.len());
    for ((na, ca), (nb, cb)) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(na, nb);
        assert_eq!(ca.encode(), cb.encode(), "{na}");
    }
}

#[test]
fn same_seed_same_run() {
    let cfg = FederationConfig { write_checkpoints: true, ..small() };
    let a = run_federation(&cfg).unwrap();
    let b = run_federation(&cfg).unwrap();
    assert_eq!(a.history.to_csv().unwrap(), b.history.to_csv().unwrap());
    for ((_, ca), (_, cb)) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(ca.encode(), cb.encode());
    }
    let c = run_federation(&FederationConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.history.to_csv().unwrap(), c.history.to_csv().unwrap());
}

#[test]
fn zero_epochs_upload_the_initialization() {
    let cfg = small();
    let bb = backbone_for(&cfg);
    let fed = federation_for(&cfg, &bb).unwrap();
    let init = initial_model(&cfg, &bb);
    let mut c = ClientState::new(&fed.shards[4], &bb, init.clone(), cfg.seed).unwrap();
    let out = client_local_stage1(&mut c, &bb, &settings(&cfg, 0, cfg.effective_lambdas(), 1)).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(bits(&out.update.visual_params), bits(&init.connector.task_adapter().to_params()));
    assert_eq!(bits(&out.update.text_params), bits(&init.text.to_params()));
    assert_eq!(c.model, init);
}

#[test]
fn single_client_single_task() {
    let cfg = FederationConfig { clients: 1, tasks: 1, rounds: 1, top_m: 1, ..small() };
    let run = run_federation(&cfg).unwrap();
    assert_eq!(run.history.stage_tags(), vec![1]);
    assert_eq!(run.history.rounds[0].clients.len(), 1);

    // with one client and one task both aggregations are the identity
    let bb = backbone_for(&cfg);
    let fed = federation_for(&cfg, &bb).unwrap();
    let mut c = ClientState::new(&fed.shards[0], &bb, initial_model(&cfg, &bb), cfg.seed).unwrap();
    let out = client_local_stage1(&mut c, &bb, &settings(&cfg, 1, cfg.effective_lambdas(), 1)).unwrap();
    let mut server = ServerState::default();
    let b = server_aggregate_and_broadcast(
        &mut server,
        std::slice::from_ref(&out.update),
        &[0],
        &ServerSettings::from_config(&cfg),
        1,
        Stage::One,
    )
    .unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].task_adapters.len(), 1);
    assert_eq!(bits(&b[0].task_adapters[&0]), bits(&out.update.visual_params));
    assert_eq!(bits(&b[0].text), bits(&out.update.text_params));
}

#[test]
fn broadcasts_hold_every_task_adapter() {
    let cfg = small();
    let run = after_transition(&cfg);
    assert_eq!(run.server.task_adapters.len(), cfg.tasks);
    assert_eq!(run.server.client_text.len(), cfg.clients);
}

#[test]
fn missing_upload_aborts_the_round() {
    let cfg = small();
    let bb = backbone_for(&cfg);
    let fed = federation_for(&cfg, &bb).unwrap();
    let init = initial_model(&cfg, &bb);
    let ups: Vec<ClientUpdate> = fed.shards[..3]
        .iter()
        .map(|s| {
            let mut c = ClientState::new(s, &bb, init.clone(), cfg.seed).unwrap();
            client_local_stage1(&mut c, &bb, &settings(&cfg, 0, (0.0, 0.0, 0.0), 1)).unwrap().update
        })
        .collect();
    let mut server = ServerState::default();
    let err = server_aggregate_and_broadcast(
        &mut server,
        &ups[..2],
        &[0, 1, 2],
        &ServerSettings::from_config(&cfg),
        1,
        Stage::One,
    )
    .unwrap_err();
    assert!(err.to_string().contains("client(s) 2"), "{err}");
    assert!(server.task_adapters.is_empty());
}

fn fedavg_by_hand(sets: &[ParamSet], counts: &[usize]) -> ParamSet {
    let total: usize = counts.iter().sum();
    let mut out = ParamSet::new();
    for (name, first) in sets[0].iter() {
        let mut acc = vec![0.0; first.len()];
        for (p, &n) in sets.iter().zip(counts) {
            let w = n as f64 / total as f64;
            for (a, v) in acc.iter_mut().zip(p.get(name).unwrap().data()) {
                *a += w * v;
            }
        }
        out.insert(name, Tensor::new(first.shape().to_vec(), acc).unwrap());
    }
    out
}

#[test]
fn everything_off_reduces_to_plain_fedavg() {
    let cfg = FederationConfig {
        clients: 3,
        tasks: 1,
        sizes: vec![30, 40, 50],
        top_m: 1,
        cross_adapter: false,
        ata: false,
        diff_loss: false,
        aux_losses: false,
        lambda0: 0.0,
        lambda1: 0.0,
        lambda2: 0.0,
        ..small()
    };
    assert_eq!(cfg.effective_text_agg(), TextAgg::AllClients);
    let run = run_federation(&cfg).unwrap();

    let bb = backbone_for(&cfg);
    let fed = federation_for(&cfg, &bb).unwrap();
    let init = initial_model(&cfg, &bb);
    assert!(init.client_adapter.is_none());
    let mut clients: Vec<ClientState> =
        fed.shards.iter().map(|s| ClientState::new(s, &bb, init.clone(), cfg.seed).unwrap()).collect();
    for r in 1..=cfg.rounds {
        let lr = if r == 1 { cfg.lr_stage1 } else { cfg.lr_stage2 };
        let s = LocalSettings { epochs: cfg.local_epochs, batch_size: cfg.batch_size, lr, lambdas: (0.0, 0.0, 0.0), round: r };
        let ups: Vec<ClientUpdate> = clients.iter_mut().map(|c| client_local_stage1(c, &bb, &s).unwrap().update).collect();
        let counts: Vec<usize> = ups.iter().map(|u| u.sample_count).collect();
        let visual = fedavg_by_hand(&ups.iter().map(|u| u.visual_params.clone()).collect::<Vec<_>>(), &counts);
        let text = fedavg_by_hand(&ups.iter().map(|u| u.text_params.clone()).collect::<Vec<_>>(), &counts);
        for c in &mut clients {
            c.model.connector = Connector::Single(AdapterParams::from_params(&visual).unwrap());
            c.model.text.set_params(&text).unwrap();
        }
    }
    for (a, b) in run.clients.iter().zip(&clients) {
        assert_eq!(bits(&a.model.connector.task_adapter().to_params()), bits(&b.model.connector.task_adapter().to_params()));
        assert_eq!(bits(&a.model.text.to_params()), bits(&b.model.text.to_params()));
    }
}

#[test]
fn balance_loss_spreads_routing_on_a_rigged_shard() {
    let cfg = FederationConfig { samples_per_client: 80, ..small() };
    let run = after_transition(&cfg);
    let bb = run.backbone.clone();
    let mut rigged = run.clients[0].clone();
    // one foreign slot becomes a strong random adapter that alone explains the answers
    let mut r = seeding::rng(99, Purpose::Init, 7);
    let oracle = AdapterParams::random(&cfg.model, &mut r).with_output_scale(3.0);
    let Connector::Moa(m) = &mut rigged.model.connector else { unreachable!() };
    m.foreign_adapters[0] = oracle.clone();
    let mut teacher = rigged.clone();
    teacher.model.connector = Connector::Single(oracle);
    teacher.model.use_client_adapter = false;
    let all: Vec<usize> = (0..rigged.data.targets.len()).collect();
    let answers = teacher.model.predict(&bb, &rigged.data.batch(&all).unwrap()).unwrap();
    rigged.data.targets = answers;

    let max_share = |lambda1: f64| {
        let mut c = rigged.clone();
        let s = LocalSettings { epochs: 6, batch_size: 8, lr: 0.02, lambdas: (0.0, lambda1, 0.0), round: 2 };
        client_local_stage2(&mut c, &bb, &s).unwrap();
        let Connector::Moa(m) = &c.model.connector else { unreachable!() };
        let h = c.data.batch(&c.train).unwrap().h;
        let routing = router_forward(&h, &m.router, cfg.pooling).unwrap();
        dispatch_fractions(&routing.per_token).into_iter().fold(0.0, f64::max)
    };
    let free = max_share(0.0);
    let balanced = max_share(0.1);
    assert!(free > balanced, "max dispatch share {free} without vs {balanced} with the balance loss");
}

#[test]
fn accuracy_on_self_generated_and_random_targets() {
    let cfg = FederationConfig { samples_per_client: 2000, clients: 3, ..small() };
    let bb = backbone_for(&cfg);
    let fed = federation_for(&cfg, &bb).unwrap();
    let mut c = ClientState::new(&fed.shards[0], &bb, initial_model(&cfg, &bb), cfg.seed).unwrap();
    let all: Vec<usize> = (0..c.data.targets.len()).collect();

    c.data.targets = c.model.predict(&bb, &c.data.batch(&all).unwrap()).unwrap();
    assert_eq!(evaluate_client(&c, &bb, &all).unwrap(), 1.0);

    let v = cfg.model.vocab;
    let mut r = seeding::rng(5, Purpose::Samples, 0);
    c.data.targets = all.iter().map(|_| r.gen_range(0..v)).collect();
    let acc = evaluate_client(&c, &bb, &all).unwrap();
    let p = 1.0 / v as f64;
    let sigma = (p * (1.0 - p) / all.len() as f64).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc} vs chance {p} (sigma {sigma})");
    assert!(evaluate_client(&c, &bb, &[]).is_err());
}
