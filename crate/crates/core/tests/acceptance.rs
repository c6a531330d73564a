//! Acceptance run: one PASS/FAIL line per primary criterion. Exits nonzero
//! if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use asyncfl_core::data::Dataset;
use asyncfl_core::experiment::{centralized_accuracy, median};
use asyncfl_core::schedule::{cosine_decay_lr, LrRegime};
use asyncfl_core::sim::privacy::RowIndex;
use asyncfl_core::sim::*;
use asyncfl_core::strategy::{
    aggregate_asyn2f, contribution_ratio, local_mix_coefficient, merge_local, normalize_ratios, GlobalModelRecord,
    LocalModelSubmission, StrategyKind,
};
use asyncfl_core::wire::{self, WireMessage};
use asyncfl_core::ParameterVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances and budgets
const FORMULA_TOL: f64 = 1e-12;
const ORACLE_TRIALS: usize = 1000;
const ORACLE_BUDGET_S: f64 = 5.0;
const WIRE_MESSAGES: usize = 10_000;
const WIRE_BUDGET_S: f64 = 10.0;
const CONVERGENCE_FRACTION: f64 = 0.95;
const CONVERGENCE_BUDGET_S: f64 = 120.0;
const TARGET_FRACTION: f64 = 0.9;
const SLOW_FACTOR: f64 = 5.0;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const LOSS_EPS: f64 = 1e-8;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn main() {
    let checks: Vec<(&'static str, fn() -> (bool, String))> = vec![
        ("formula oracles", formula_oracles),
        ("protocol fidelity", protocol_fidelity),
        ("synchronous reduction", synchronous_reduction),
        ("desk-scale convergence", convergence),
        ("comparative speed", comparative_speed),
        ("staleness penalty", staleness_penalty),
        ("determinism", determinism),
        ("privacy wire invariant", privacy),
        ("learning-rate synchronization", lr_synchronization),
    ];
    let mut results = Vec::new();
    for (name, check) in checks {
        let (pass, detail) = check();
        let o = Outcome { name, pass, detail };
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        results.push(o);
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn base(kind: StrategyKind, seed: u64) -> Scenario {
    Scenario::default().with_variant(kind, LrRegime::SyncDecay, seed)
}

fn slow(kind: StrategyKind, seed: u64) -> Scenario {
    let mut sc = Scenario::default();
    let last = sc.profiles.len() - 1;
    sc.profiles[last].batch_cost *= SLOW_FACTOR;
    sc.with_variant(kind, LrRegime::SyncDecay, seed)
}

fn pv(v: &[f64]) -> ParameterVector {
    ParameterVector::new(v.to_vec()).unwrap()
}

fn submission(id: &str, w: Vec<f64>, loss: f64, qod: f64, size: u64, used: u64, t: f64, arrival: u64) -> LocalModelSubmission {
    LocalModelSubmission {
        worker_id: id.into(),
        weights: ParameterVector::new(w).unwrap(),
        loss,
        qod,
        data_size: size,
        global_version_used: used,
        submit_time: t,
        arrival,
    }
}

fn formula_oracles() -> (bool, String) {
    let mut bad = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > FORMULA_TOL {
            bad.push(format!("{what}: {got} != {want}"));
        }
    };
    let r = |q, s, l, i, ik| contribution_ratio(&submission("a", vec![0.0], l, q, s, ik, 0.0, 0), i, LOSS_EPS).unwrap();
    check("ratio Q=.9 s=1000 L=.5 delay 1", r(0.9, 1000, 0.5, 3, 2), 1800.0);
    check("ratio Q=1 s=100 L=1 delay 1", r(1.0, 100, 1.0, 2, 1), 100.0);
    let n = normalize_ratios(&[1800.0, 200.0]).unwrap();
    check("normalize 1800/200 [0]", n[0], 0.9);
    check("normalize 1800/200 [1]", n[1], 0.1);
    let g = GlobalModelRecord {
        version: 1,
        weights: pv(&[0.0]),
        avg_qod: 1.0,
        total_data_size: 300,
        avg_loss: 1.0,
        contributors: vec![],
    };
    check("local mix", local_mix_coefficient(1.0, 100, 3.0, &g, 0.5, LOSS_EPS).unwrap(), 0.25);
    let m = merge_local(&pv(&[0.5, 0.2]), &pv(&[0.4, 0.4]), &pv(&[0.3, 0.3]), 0.25).unwrap();
    check("merge same sign", m.as_slice()[0], 0.5);
    check("merge opposite sign", m.as_slice()[1], 0.25);

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..ORACLE_TRIALS {
        let workers = rng.random_range(1..=3);
        let len = rng.random_range(1..=4);
        let version = rng.random_range(1..=20u64);
        let queue: Vec<_> = (0..rng.random_range(1..=5))
            .map(|k| {
                let w = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
                submission(
                    &format!("w{}", rng.random_range(0..workers)),
                    w,
                    rng.random_range(0.01..3.0),
                    rng.random_range(0.1..=1.0),
                    rng.random_range(1..2000),
                    rng.random_range(0..version),
                    rng.random_range(0..4) as f64,
                    k,
                )
            })
            .collect();
        let got = aggregate_asyn2f(&queue, version, LOSS_EPS).unwrap().record.weights;
        // direct evaluation
        let mut latest: BTreeMap<&str, &LocalModelSubmission> = BTreeMap::new();
        for s in &queue {
            if latest
                .get(s.worker_id.as_str())
                .is_none_or(|c| (s.submit_time, s.arrival) > (c.submit_time, c.arrival))
            {
                latest.insert(&s.worker_id, s);
            }
        }
        let alphas: Vec<f64> = latest
            .values()
            .map(|s| s.qod * s.data_size as f64 / (s.loss * (version - s.global_version_used) as f64))
            .collect();
        let total: f64 = alphas.iter().sum();
        let mut want = vec![0.0; len];
        for (s, a) in latest.values().zip(&alphas) {
            for (o, w) in want.iter_mut().zip(s.weights.as_slice()) {
                *o += a / total * w;
            }
        }
        if got.as_slice().iter().zip(&want).any(|(a, b)| (a - b).abs() > FORMULA_TOL) {
            mismatches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = bad.is_empty() && mismatches == 0 && secs < ORACLE_BUDGET_S;
    (
        pass,
        format!(
            "hand examples {} mismatched; brute force {mismatches}/{ORACLE_TRIALS} mismatched in {secs:.2}s (tol {FORMULA_TOL:e}){}",
            bad.len(),
            if bad.is_empty() { String::new() } else { format!(" [{}]", bad.join("; ")) }
        ),
    )
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn random_message(rng: &mut ChaCha8Rng) -> WireMessage {
    let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.random_range(0..1_000_000u32));
    let ts = wire::sim_timestamp(rng.random_range(0.0..2e9));
    let text = fixture(match rng.random_range(0..4) {
        0 => "worker_init.json",
        1 => "server_init_resp.json",
        2 => "server_notify.json",
        _ => "worker_notify.json",
    });
    let mut msg = wire::decode(&text).unwrap();
    match &mut msg {
        WireMessage::WorkerInit(m) => {
            m.headers.worker_id = word(rng);
            m.headers.session_id = word(rng);
            m.headers.timestamp = ts;
            m.content.data_description.size = rng.random_range(1..1_000_000);
            m.content.data_description.qod = rng.random_range(0.001..=1.0);
            m.content.system_info.ram = word(rng);
        }
        WireMessage::ServerInitResp(m) => {
            m.headers.timestamp = ts;
            m.content.model_info.version = rng.random_range(0..100_000);
            m.content.model_info.exchange_at.performance = rng.random_range(0.0..=1.0);
            m.content.model_info.exchange_at.epoch = rng.random_range(1..1000);
            m.content.storage_info.bucket_name = word(rng);
        }
        WireMessage::ServerNotify(m) => {
            m.headers.timestamp = ts;
            let g = &mut m.content.global_model;
            g.version = rng.random_range(1..100_000);
            g.total_data_size = rng.random_range(1..10_000_000);
            g.avg_qod = rng.random_range(0.001..=1.0);
            g.avg_loss = rng.random_range(0.0..50.0);
            m.content.learning_rate = rng.random_bool(0.5).then(|| rng.random_range(0.0..1.0));
            m.content.worker_id = (0..rng.random_range(0..4)).map(|_| word(rng)).collect();
        }
        WireMessage::WorkerNotify(m) => {
            m.headers.worker_id = word(rng);
            m.headers.timestamp = ts;
            m.content.global_version_used = rng.random_range(0..100_000);
            m.content.performance = rng.random_range(0.0..=1.0);
            m.content.loss = rng.random_range(0.0..50.0);
            m.content.file_name = format!("epoch_{}.pkl", rng.random_range(1..1000));
        }
    }
    msg
}

fn protocol_fidelity() -> (bool, String) {
    let mut bad = Vec::new();
    match wire::decode(&fixture("server_notify.json")) {
        Ok(WireMessage::ServerNotify(m)) => {
            let g = &m.content.global_model;
            if (g.version, g.avg_qod, g.avg_loss, g.total_data_size) != (1, 0.89, 1.232, 42432) {
                bad.push("server notify values".to_string());
            }
        }
        other => bad.push(format!("server notify: {other:?}")),
    }
    match wire::decode(&fixture("worker_notify.json")) {
        Ok(msg @ WireMessage::WorkerNotify(_)) => {
            let out = String::from_utf8(wire::encode(&msg).unwrap()).unwrap();
            if !out.contains("\"loss\":1.232") || !out.contains("\"performance\":0.8934") {
                bad.push("worker notify encoding".into());
            }
        }
        other => bad.push(format!("worker notify: {other:?}")),
    }
    match wire::decode(&fixture("worker_init.json")) {
        Ok(WireMessage::WorkerInit(m)) if m.content.data_description.qod == 0.95 && m.content.data_description.size == 123 => {}
        other => bad.push(format!("worker init: {other:?}")),
    }
    match wire::decode(&fixture("server_init_resp.json")) {
        Ok(WireMessage::ServerInitResp(m))
            if m.content.model_info.version == 2 && m.content.model_info.exchange_at.epoch == 100 => {}
        other => bad.push(format!("server init resp: {other:?}")),
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = 0;
    for _ in 0..WIRE_MESSAGES {
        let msg = random_message(&mut rng);
        let ok = wire::encode(&msg)
            .ok()
            .and_then(|b| wire::decode(&b).ok())
            .is_some_and(|back| back == msg);
        failures += usize::from(!ok);
    }
    let secs = started.elapsed().as_secs_f64();
    (
        bad.is_empty() && failures == 0 && secs < WIRE_BUDGET_S,
        format!(
            "golden corpus {} mismatches; round trip {failures}/{WIRE_MESSAGES} failed in {secs:.2}s{}",
            bad.len(),
            if bad.is_empty() { String::new() } else { format!(" [{}]", bad.join("; ")) }
        ),
    )
}

fn synchronous_reduction() -> (bool, String) {
    let sc = slow(StrategyKind::Fedavg, 1);
    let trainers: BTreeSet<String> = sc.profiles.iter().map(|p| p.worker_id.clone()).collect();
    let out = run_scenario(&sc).unwrap();
    let mut since: BTreeMap<String, usize> = BTreeMap::new();
    let mut rounds = 0;
    let mut violations = 0;
    for e in &out.log {
        match &e.kind {
            EventKind::EpochDone { worker, .. } => *since.entry(worker.clone()).or_default() += 1,
            EventKind::Aggregation { .. } => {
                rounds += 1;
                let ok = trainers.iter().all(|t| since.get(t) == Some(&1)) && since.len() == trainers.len();
                violations += usize::from(!ok);
                since.clear();
            }
            _ => {}
        }
    }
    (
        rounds > 0 && violations == 0 && out.complete,
        format!("{rounds} rounds with {} trainers, {violations} rounds without exactly one epoch per trainer", trainers.len()),
    )
}

fn convergence() -> (bool, String) {
    let started = Instant::now();
    let mut ratios = Vec::new();
    let mut cells = Vec::new();
    for seed in SEEDS {
        let sc = base(StrategyKind::Asyn2f, seed);
        let central = centralized_accuracy(&sc).unwrap();
        let acc = run_scenario(&sc).unwrap().metrics.final_accuracy().unwrap_or(0.0);
        ratios.push(acc / central);
        cells.push(format!("s{seed} {acc:.3}/{central:.3}"));
    }
    let med = median(&ratios).unwrap();
    let secs = started.elapsed().as_secs_f64();
    // diagnostic only: the same runs with plain SGD
    let plain: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| {
            let mut sc = base(StrategyKind::Asyn2f, seed);
            sc.train.momentum = 0.0;
            let central = centralized_accuracy(&sc).unwrap();
            run_scenario(&sc).unwrap().metrics.final_accuracy().unwrap_or(0.0) / central
        })
        .collect();
    (
        med >= CONVERGENCE_FRACTION && secs < CONVERGENCE_BUDGET_S,
        format!(
            "median final/centralized {med:.3} (need {CONVERGENCE_FRACTION}) in {secs:.1}s; {}; momentum 0 would give median {:.3}",
            cells.join(", "),
            median(&plain).unwrap()
        ),
    )
}

fn comparative_speed() -> (bool, String) {
    let mut times: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        let central = centralized_accuracy(&slow(StrategyKind::Asyn2f, seed)).unwrap();
        for kind in [StrategyKind::Asyn2f, StrategyKind::Fedavg, StrategyKind::MstepKafl] {
            let out = run_scenario(&slow(kind, seed)).unwrap();
            let t = out
                .metrics
                .time_to_accuracy(TARGET_FRACTION * central)
                .unwrap_or(f64::INFINITY);
            times.entry(kind.as_str()).or_default().push(t);
        }
    }
    let med: BTreeMap<&str, f64> = times.iter().map(|(k, v)| (*k, median(v).unwrap())).collect();
    (
        med["asyn2f"] <= med["fedavg"],
        format!(
            "median time to {TARGET_FRACTION}×centralized: asyn2f {} fedavg {} mstep_kafl {} (per seed {:?})",
            med["asyn2f"], med["fedavg"], med["mstep_kafl"], times
        ),
    )
}

fn staleness_penalty() -> (bool, String) {
    let sc = slow(StrategyKind::Asyn2f, 1);
    let slow_id = sc.profiles.last().unwrap().worker_id.clone();
    let out = run_scenario(&sc).unwrap();
    let (mut slow_w, mut fast_w) = (Vec::new(), Vec::new());
    for e in &out.log {
        if let EventKind::Aggregation { shares, .. } = &e.kind {
            for s in shares {
                if s.worker_id == slow_id {
                    slow_w.push(s.weight);
                } else {
                    fast_w.push(s.weight);
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (ms, mf) = (mean(&slow_w), mean(&fast_w));
    let one = contribution_ratio(&submission("a", vec![0.0], 0.4, 0.8, 400, 9, 0.0, 0), 10, LOSS_EPS).unwrap();
    let two = contribution_ratio(&submission("a", vec![0.0], 0.4, 0.8, 400, 8, 0.0, 0), 10, LOSS_EPS).unwrap();
    (
        !slow_w.is_empty() && ms < mf && two * 2.0 == one,
        format!(
            "slow worker mean weight {ms:.4} over {} shares vs fast {mf:.4} over {}; doubled delay ratio {two} vs {one}",
            slow_w.len(),
            fast_w.len()
        ),
    )
}

fn determinism() -> (bool, String) {
    let mut checked = 0;
    let mut diffs = Vec::new();
    for kind in [StrategyKind::Asyn2f, StrategyKind::Fedavg, StrategyKind::MstepKafl] {
        for sc in [base(kind, 3), slow(kind, 4)] {
            let a = run_scenario(&sc).unwrap();
            let b = run_scenario(&sc).unwrap();
            let mut la = Vec::new();
            let mut lb = Vec::new();
            write_log(&a.log, &mut la).unwrap();
            write_log(&b.log, &mut lb).unwrap();
            let same = la == lb
                && a.metrics.global_csv().unwrap() == b.metrics.global_csv().unwrap()
                && a.metrics.epochs_csv().unwrap() == b.metrics.epochs_csv().unwrap()
                && a.metrics.comm_csv().unwrap() == b.metrics.comm_csv().unwrap();
            if !same {
                diffs.push(kind.as_str());
            }
            checked += 1;
        }
    }
    (
        diffs.is_empty(),
        format!("{checked} scenario pairs, {} differed {diffs:?}", diffs.len()),
    )
}

fn privacy() -> (bool, String) {
    let mut leaks = 0;
    let mut payloads = 0;
    let mut objects = 0;
    for kind in [StrategyKind::Asyn2f, StrategyKind::Fedavg, StrategyKind::MstepKafl] {
        let sc = base(kind, 1);
        let data = build_datasets(&sc).unwrap();
        let refs: Vec<&Dataset> = data.parts.iter().collect();
        let index = RowIndex::new(&refs);
        let out = run_scenario(&sc).unwrap();
        for (i, p) in out.payloads.iter().enumerate() {
            leaks += index.scan(&format!("payload #{i}"), p).len();
        }
        for (key, bytes) in &out.objects {
            leaks += index.scan(&format!("{key:?}"), bytes).len();
        }
        payloads += out.payloads.len();
        objects += out.objects.len();
    }
    (
        leaks == 0 && payloads > 0 && objects > 0,
        format!("{leaks} feature rows found in {payloads} broker payloads and {objects} stored objects"),
    )
}

fn lr_synchronization() -> (bool, String) {
    let mut violations = 0;
    let mut batches = 0;
    for kind in [StrategyKind::Asyn2f, StrategyKind::Fedavg, StrategyKind::MstepKafl] {
        let sc = slow(kind, 2);
        let (lr0, total) = (sc.train.lr_initial, sc.train.decay_steps);
        let out = run_scenario(&sc).unwrap();
        let mut adopted: BTreeMap<&str, (u64, f64)> = BTreeMap::new();
        for e in &out.log {
            match &e.kind {
                EventKind::Adopt { worker, version, lr, .. } => {
                    let expected = cosine_decay_lr(*version, total, lr0);
                    if *lr != Some(expected) {
                        violations += 1;
                    }
                    adopted.insert(worker, (*version, lr.unwrap_or(f64::NAN)));
                }
                EventKind::BatchDone { worker, version, lr, .. } => {
                    batches += 1;
                    let joined = adopted.get(worker.as_str());
                    if joined.map(|a| a.0) != Some(*version) || *lr != cosine_decay_lr(*version, total, lr0) {
                        violations += 1;
                    }
                }
                _ => {}
            }
        }
    }
    (
        violations == 0 && batches > 0,
        format!("{batches} batches cross-joined with adoptions, {violations} violations"),
    )
}
