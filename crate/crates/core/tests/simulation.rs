use std::collections::BTreeSet;

use asyncfl_core::data::SplitMode;
use asyncfl_core::schedule::LrRegime;
use asyncfl_core::server::{AggregationCondition, ControlAck};
use asyncfl_core::sim::*;
use asyncfl_core::strategy::StrategyKind;
use asyncfl_core::wire::{ControlCommand, MetricKind};

fn scenario(workers: usize, n_per_worker: usize) -> Scenario {
    let mut sc = Scenario::default();
    sc.profiles = (1..=workers)
        .map(|i| WorkerProfile::new(format!("id{i:03}"), Preset::Gpu))
        .collect();
    sc.data.n = n_per_worker * workers;
    sc.data.split = SplitMode::DisjointIid;
    sc.aggregation = AggregationCondition::OnCount { n: workers.min(3) };
    sc.with_variant(StrategyKind::Asyn2f, LrRegime::SyncDecay, 1)
}

fn epoch_ends(log: &[SimEvent], who: &str) -> Vec<f64> {
    log.iter()
        .filter_map(|e| match &e.kind {
            EventKind::EpochDone { worker, .. } if worker == who => Some(e.time),
            _ => None,
        })
        .collect()
}

#[test]
fn first_epoch_ends_after_batches_times_cost() {
    let mut sc = scenario(1, 320);
    sc.train.local_rounds_per_epoch = 1;
    sc.server.stop.max_epochs = Some(1);
    let out = run_scenario(&sc).unwrap();
    let ends = epoch_ends(&out.log, "id001");
    assert_eq!(ends[0], 10.0);
    let batches = out
        .log
        .iter()
        .filter(|e| matches!(&e.kind, EventKind::BatchDone { epoch: 1, .. }))
        .count();
    assert_eq!(batches, 10);
    assert!(out.complete);

    // five passes per epoch: 50 batches
    let mut sc = scenario(1, 320);
    sc.train.local_rounds_per_epoch = 5;
    sc.server.stop.max_epochs = Some(1);
    let out = run_scenario(&sc).unwrap();
    assert_eq!(epoch_ends(&out.log, "id001")[0], 50.0);
}

#[test]
fn symmetric_workers_finish_epochs_together() {
    let sc = scenario(3, 320);
    let out = run_scenario(&sc).unwrap();
    let a = epoch_ends(&out.log, "id001");
    assert!(a.len() >= 3);
    for other in ["id002", "id003"] {
        let b = epoch_ends(&out.log, other);
        assert_eq!(a[..3], b[..3]);
    }
}

#[test]
fn failed_worker_goes_silent() {
    let mut sc = scenario(4, 320);
    sc.profiles[1].failure_time = Some(25.0);
    let out = run_scenario(&sc).unwrap();
    let left = out
        .log
        .iter()
        .find(|e| matches!(&e.kind, EventKind::Leave { worker, reason: LeaveReason::Failure } if worker == "id002"))
        .expect("leave event");
    assert_eq!(left.time, 25.0);
    assert!(!out.log.iter().any(|e| e.time > 25.0
        && matches!(&e.kind, EventKind::BatchDone { worker, .. } | EventKind::EpochDone { worker, .. } if worker == "id002")));
    // the rest carry on to the end
    assert!(out.complete);
}

#[test]
fn same_seed_same_log() {
    let sc = Scenario::default().with_variant(StrategyKind::Asyn2f, LrRegime::SyncDecay, 1);
    let a = run_scenario(&sc).unwrap();
    let b = run_scenario(&sc).unwrap();
    assert!(replay_check(&a.log, &b.log));
    assert_eq!(a.metrics.global_csv().unwrap(), b.metrics.global_csv().unwrap());
    let c = run_scenario(&sc.clone().with_variant(StrategyKind::Asyn2f, LrRegime::SyncDecay, 2)).unwrap();
    assert!(!replay_check(&a.log, &c.log));
}

#[test]
fn log_round_trips_through_jsonl() {
    let mut sc = scenario(2, 160);
    sc.server.stop.max_epochs = Some(3);
    let out = run_scenario(&sc).unwrap();
    let mut buf = Vec::new();
    write_log(&out.log, &mut buf).unwrap();
    let back = read_log(buf.as_slice()).unwrap();
    assert!(replay_check(&out.log, &back));
}

#[test]
fn log_is_causal() {
    let mut sc = Scenario::default().with_variant(StrategyKind::Asyn2f, LrRegime::SyncDecay, 3);
    for (i, p) in sc.profiles.iter_mut().enumerate() {
        p.uplink = 0.5 * i as f64;
        p.downlink = 0.25;
    }
    let out = run_scenario(&sc).unwrap();
    for (i, w) in out.log.windows(2).enumerate() {
        assert!(w[0].time <= w[1].time, "time went backwards at {i}");
    }
    for (i, e) in out.log.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
        if let EventKind::MsgDelivered { published_at, .. } = &e.kind {
            assert!(*published_at <= e.time);
        }
    }
    // a worker never trains on a version before it was aggregated
    let mut made = std::collections::BTreeMap::from([(0u64, 0.0f64)]);
    for e in &out.log {
        match &e.kind {
            EventKind::Aggregation { version, .. } => {
                made.insert(*version, e.time);
            }
            EventKind::BatchDone { version, .. } => assert!(made[version] <= e.time),
            _ => {}
        }
    }
}

#[test]
fn stop_worker_removes_it_from_later_rounds() {
    let mut sc = scenario(3, 320);
    sc.aggregation = AggregationCondition::OnCount { n: 2 };
    sc = sc.with_variant(StrategyKind::Asyn2f, LrRegime::SyncDecay, 1);
    sc.server.stop.max_epochs = Some(20);
    let mut sim = Simulation::new(sc).unwrap();
    while sim.server().version() < 3 {
        assert!(sim.step().unwrap());
    }
    let ack = sim.inject_control(ControlCommand::StopWorker { id: "id001".into() });
    assert!(ack == ControlAck::Ok, "{ack:?}");
    while sim.step().unwrap() {}
    let log = sim.log();
    let left = log
        .iter()
        .find(|e| matches!(&e.kind, EventKind::Leave { worker, reason: LeaveReason::Stopped } if worker == "id001"))
        .expect("worker acknowledged the stop")
        .time;
    let mut contributors = BTreeSet::new();
    for e in log.iter().filter(|e| e.time > left) {
        match &e.kind {
            EventKind::Aggregation { shares, .. } => {
                contributors.extend(shares.iter().map(|s| s.worker_id.clone()));
            }
            EventKind::BatchDone { worker, .. } => assert_ne!(worker, "id001"),
            _ => {}
        }
    }
    assert!(!contributors.is_empty());
    assert!(!contributors.contains("id001"), "{contributors:?}");
    assert!(contributors.len() <= 2);
}

#[test]
fn stop_training_ends_aggregation() {
    let sc = Scenario::default().with_variant(StrategyKind::Asyn2f, LrRegime::SyncDecay, 1);
    let mut sim = Simulation::new(sc).unwrap();
    while sim.server().version() < 5 {
        assert!(sim.step().unwrap());
    }
    assert_eq!(sim.inject_control(ControlCommand::StopTraining), ControlAck::Ok);
    // a second stop is refused
    assert_ne!(sim.inject_control(ControlCommand::StopTraining), ControlAck::Ok);
    while sim.step().unwrap() {}
    let log = sim.log();
    let acked = log
        .iter()
        .find(|e| matches!(&e.kind, EventKind::Control { cmd: ControlCommand::StopTraining, .. }))
        .expect("control reached the server")
        .time;
    assert!(!log
        .iter()
        .any(|e| e.time > acked && matches!(e.kind, EventKind::Aggregation { .. })));
    assert!(log.iter().any(|e| matches!(e.kind, EventKind::Stop { .. })));
}

#[test]
fn monitor_sees_every_epoch_loss() {
    let mut sc = scenario(5, 160);
    sc.aggregation = AggregationCondition::OnCount { n: 5 };
    sc = sc.with_variant(StrategyKind::Asyn2f, LrRegime::SyncDecay, 1);
    sc.server.stop.max_epochs = Some(10);
    let mut sim = Simulation::new(sc).unwrap();
    let sub = sim.monitor().lock().unwrap().subscribe(4096);
    while sim.step().unwrap() {}
    let epochs = sim
        .log()
        .iter()
        .filter(|e| matches!(e.kind, EventKind::EpochDone { .. }))
        .count();
    let store = sim.monitor();
    let store = store.lock().unwrap();
    let losses = store
        .events()
        .iter()
        .filter(|e| e.kind == MetricKind::WorkerLoss)
        .count();
    assert!(losses >= 50, "{losses}");
    assert_eq!(losses, epochs);
    let streamed = sub.drain();
    assert_eq!(streamed.len(), store.len());
    assert_eq!(store.dropped(), 0);
}

#[test]
fn fedavg_rounds_take_one_epoch_from_each() {
    let mut sc = Scenario::default();
    sc.profiles[4].batch_cost = 5.0;
    let sc = sc.with_variant(StrategyKind::Fedavg, LrRegime::SyncDecay, 1);
    let out = run_scenario(&sc).unwrap();
    assert!(out.complete);
    for e in &out.log {
        if let EventKind::Aggregation { shares, .. } = &e.kind {
            let ids: BTreeSet<_> = shares.iter().map(|s| &s.worker_id).collect();
            assert_eq!(ids.len(), 5);
            assert_eq!(shares.len(), 5);
        }
    }
}

#[test]
fn scenario_text_round_trip() {
    let mut sc = Scenario::default();
    sc.profiles[2].failure_time = Some(40.0);
    sc.profiles[3].uplink = 1.5;
    let back = Scenario::parse(&sc.to_text()).unwrap();
    assert_eq!(back, sc);
    let err = Scenario::parse("seed = 1\nbogus = 2\n").unwrap_err();
    assert_eq!(err.line, 2);
}

