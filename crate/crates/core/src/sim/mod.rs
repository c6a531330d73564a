//! Deterministic discrete-event simulation of a full training run.
//!
//! One server, a set of trainers with heterogeneous batch costs and link
//! latencies, and an optional tester exchange real wire messages through
//! the in-memory broker and real model objects through the in-memory
//! store. Time is virtual; all ordering ties break on a sequence number,
//! so a run is a pure function of its [`Scenario`].

pub mod metrics;
pub mod privacy;
pub mod scenario;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::broker::{routing_key, Broker, Direction, InMemoryBroker};
use crate::data::{make_synthetic_dataset, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::monitor::MetricStore;
use crate::params::ParameterVector;
use crate::schedule::{cosine_decay_lr, LrRegime, TrainConfig};
use crate::server::{ControlAck, Server, SubmissionOutcome, TesterReport};
use crate::storage::{
    decode_weights, BucketStatus, MemoryStore, ObjectKey, ObjectStore, TransferStats,
};
use crate::strategy::{GlobalModelRecord, Share};
use crate::wire::{
    self, ControlCommand, MetricEvent, MetricKind, Role, SystemInfo, WireMessage,
};
use crate::worker::{AdoptMode, MergePolicy, Tester, Worker, WorkerConfig};

pub use metrics::{CommRow, EpochRow, GlobalRow, Metrics};
pub use scenario::{DataConfig, LinkProfile, Preset, Scenario, ScenarioError, WorkerProfile};

const SERVER: &str = "server";
const TESTER: &str = "tester";
const MONITOR: &str = "monitor";

/// One entry of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaveReason {
    Failure,
    Stopped,
    TrainingStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Join {
        worker: String,
        role: Role,
    },
    Leave {
        worker: String,
        reason: LeaveReason,
    },
    BatchDone {
        worker: String,
        epoch: u64,
        batch: usize,
        version: u64,
        lr: f64,
        loss: f64,
    },
    EpochDone {
        worker: String,
        epoch: u64,
        started: f64,
        loss: f64,
        performance: f64,
        version_used: u64,
        submitted: bool,
    },
    UploadFailed {
        worker: String,
        epoch: u64,
        error: String,
    },
    MsgDelivered {
        queue: String,
        publisher: String,
        message: String,
        published_at: f64,
        bytes: usize,
    },
    Adopt {
        worker: String,
        version: u64,
        previous: u64,
        mode: AdoptMode,
        lr: Option<f64>,
    },
    Aggregation {
        version: u64,
        shares: Vec<Share>,
        avg_qod: f64,
        avg_loss: f64,
        total_data_size: u64,
        learning_rate: Option<f64>,
    },
    AggregationSkipped {
        version: u64,
        reason: String,
    },
    Control {
        cmd: ControlCommand,
        ack: ControlAck,
    },
    Stop {
        version: u64,
        reason: String,
    },
    Metric {
        event: MetricEvent,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Action {
    Join(usize),
    JoinTester,
    BatchDone(usize),
    Fail(usize),
    Deliver(String),
    Tick,
}

/// Object store wrapper that remembers every payload ever written.
#[derive(Debug, Default)]
pub struct TapStore {
    inner: MemoryStore,
    puts: Vec<(ObjectKey, Vec<u8>)>,
}

impl TapStore {
    pub fn inner(&self) -> &MemoryStore {
        &self.inner
    }

    pub fn puts(&self) -> &[(ObjectKey, Vec<u8>)] {
        &self.puts
    }
}

impl ObjectStore for TapStore {
    fn create_bucket(&mut self, name: &str) -> Result<BucketStatus> {
        self.inner.create_bucket(name)
    }

    fn list_buckets(&self) -> Vec<String> {
        self.inner.list_buckets()
    }

    fn put(&mut self, key: &ObjectKey, payload: &[u8]) -> Result<u64> {
        let token = self.inner.put(key, payload)?;
        self.puts.push((key.clone(), payload.to_vec()));
        Ok(token)
    }

    fn get(&mut self, key: &ObjectKey) -> Result<Vec<u8>> {
        self.inner.get(key)
    }

    fn delete(&mut self, key: &ObjectKey) -> Result<()> {
        self.inner.delete(key)
    }

    fn list(&self, bucket: &str) -> Result<Vec<String>> {
        self.inner.list(bucket)
    }

    fn stats(&self) -> TransferStats {
        self.inner.stats()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub messages_up: u64,
    pub messages_down: u64,
}

#[derive(Debug)]
struct WorkerSlot {
    profile: WorkerProfile,
    worker: Worker,
    session: String,
    joined: bool,
    started: bool,
    halted: bool,
    busy: bool,
    epoch_start: f64,
}

#[derive(Debug)]
struct TesterSlot {
    tester: Tester,
    joined: bool,
    halted: bool,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: Vec<SimEvent>,
    pub final_record: GlobalModelRecord,
    pub metrics: Metrics,
    /// False when the time budget ran out before a stop condition fired.
    pub complete: bool,
    pub end_time: f64,
    /// Every broker payload, in publish order.
    pub payloads: Vec<Vec<u8>>,
    /// Every object write, in order.
    pub objects: Vec<(ObjectKey, Vec<u8>)>,
}

/// Shared model shape for a scenario's data.
pub fn model_spec(data: &DataConfig) -> ModelSpec {
    ModelSpec::Logistic {
        dims: data.dims,
        classes: data.classes,
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The full training set, per-worker parts (with QoD applied) and the
/// tester's held-out set.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub full: Dataset,
    pub parts: Vec<Dataset>,
    pub test: Dataset,
}

pub fn build_datasets(sc: &Scenario) -> Result<ScenarioData> {
    let d = &sc.data;
    let full = make_synthetic_dataset(d.n, d.dims, d.classes, d.separation, sc.seed)?;
    let parts = split_dataset(&full, sc.profiles.len(), d.split, mix_seed(sc.seed, 1))?
        .into_iter()
        .zip(&sc.profiles)
        .map(|(part, p)| part.with_qod(p.qod))
        .collect::<Result<Vec<_>>>()?;
    let test = make_synthetic_dataset(
        d.test_n.max(d.classes),
        d.dims,
        d.classes,
        d.separation,
        mix_seed(sc.seed, 2),
    )?;
    Ok(ScenarioData { full, parts, test })
}

/// A steppable simulation. Most callers want [`run_scenario`].
pub struct Simulation {
    scenario: Scenario,
    now: f64,
    actions: BTreeMap<(OrderedFloat<f64>, u64), Action>,
    next_action: u64,
    log: Vec<SimEvent>,
    broker: InMemoryBroker,
    store: TapStore,
    server: Server,
    workers: Vec<WorkerSlot>,
    tester: Option<TesterSlot>,
    monitor: Arc<Mutex<MetricStore>>,
    traffic: BTreeMap<String, Traffic>,
    tested: BTreeMap<u64, (f64, f64, f64)>,
    finished: bool,
    complete: bool,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.now)
            .field("events", &self.log.len())
            .field("server", &self.server)
            .field("finished", &self.finished)
            .finish_non_exhaustive()
    }
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        Self::with_monitor(scenario, MetricStore::new().shared())
    }

    /// Builds a simulation that feeds (and takes commands from) `monitor`.
    pub fn with_monitor(scenario: Scenario, monitor: Arc<Mutex<MetricStore>>) -> Result<Self> {
        scenario
            .validate()
            .map_err(|e| Error::Parameter {
                name: "scenario",
                reason: e.to_string(),
            })?;
        let data = build_datasets(&scenario)?;
        let spec = model_spec(&scenario.data);

        let mut links: BTreeMap<String, (f64, f64)> = scenario
            .profiles
            .iter()
            .map(|p| (p.worker_id.clone(), (p.uplink, p.downlink)))
            .collect();
        if let Some(t) = &scenario.tester {
            links.insert(TESTER.into(), (t.uplink, t.downlink));
        }
        let latency = move |publisher: &str, queue: &str| {
            let owner = queue.split('.').next().unwrap_or(queue);
            let up = links.get(publisher).map_or(0.0, |l| l.0);
            let down = links.get(owner).map_or(0.0, |l| l.1);
            up + down
        };
        let mut broker = InMemoryBroker::new(Box::new(latency)).record_payloads();
        let job = scenario.job.clone();
        let sub = |b: &mut InMemoryBroker, q: &str, dir: Direction| {
            b.subscribe(q, &routing_key(&job, dir))
                .map(|_| ())
                .map_err(|e| Error::Storage(e.to_string()))
        };
        sub(&mut broker, SERVER, Direction::ToServer)?;
        sub(&mut broker, "server.control", Direction::Control)?;
        sub(&mut broker, "server.metrics", Direction::Metrics)?;
        sub(&mut broker, MONITOR, Direction::Metrics)?;

        let mut store = TapStore::default();
        let initial = ParameterVector::zeros(spec.param_len());
        let server = Server::new(scenario.server.clone(), initial, &mut store, 0.0)?;

        let policy = MergePolicy::from(scenario.server.strategy.kind);
        let workers = scenario
            .profiles
            .iter()
            .zip(data.parts)
            .enumerate()
            .map(|(i, (p, part))| {
                let config = WorkerConfig {
                    worker_id: p.worker_id.clone(),
                    model: spec,
                    train: TrainConfig {
                        seed: mix_seed(scenario.seed, 100 + i as u64),
                        ..scenario.train.clone()
                    },
                    beta: scenario.server.strategy.beta,
                    loss_epsilon: scenario.server.strategy.loss_epsilon,
                    merge_policy: policy,
                    system_info: SystemInfo {
                        cpu: format!("sim batch_cost={}", p.batch_cost),
                        ..SystemInfo::default()
                    },
                };
                Ok(WorkerSlot {
                    profile: p.clone(),
                    worker: Worker::new(config, part)?,
                    session: format!("{}-session", p.worker_id),
                    joined: false,
                    started: false,
                    halted: false,
                    busy: false,
                    epoch_start: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tester = scenario.tester.map(|_| TesterSlot {
            tester: Tester {
                id: TESTER.into(),
                model: spec,
                data: data.test,
                system_info: SystemInfo::default(),
                last_version: None,
            },
            joined: false,
            halted: false,
        });

        let mut sim = Self {
            now: 0.0,
            actions: BTreeMap::new(),
            next_action: 0,
            log: Vec::new(),
            broker,
            store,
            server,
            workers,
            tester,
            monitor,
            traffic: BTreeMap::new(),
            tested: BTreeMap::new(),
            finished: false,
            complete: false,
            scenario,
        };
        if sim.tester.is_some() {
            sim.schedule(0.0, Action::JoinTester);
        }
        for i in 0..sim.workers.len() {
            let p = &sim.workers[i].profile;
            let (join, fail) = (p.join_time, p.failure_time);
            sim.schedule(join, Action::Join(i));
            if let Some(t) = fail {
                sim.schedule(t, Action::Fail(i));
            }
        }
        let period = sim.scenario.server.period;
        sim.schedule(period, Action::Tick);
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn log(&self) -> &[SimEvent] {
        &self.log
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn monitor(&self) -> Arc<Mutex<MetricStore>> {
        Arc::clone(&self.monitor)
    }

    /// Operator command through the monitor; forwarded on the next step.
    pub fn inject_control(&mut self, cmd: ControlCommand) -> ControlAck {
        self.monitor.lock().expect("monitor lock").control(cmd)
    }

    fn schedule(&mut self, at: f64, action: Action) {
        self.actions
            .insert((OrderedFloat(at), self.next_action), action);
        self.next_action += 1;
    }

    fn record(&mut self, kind: EventKind) {
        let seq = self.log.len() as u64;
        self.log.push(SimEvent {
            time: self.now,
            seq,
            kind,
        });
    }

    fn traffic(&mut self, who: &str) -> &mut Traffic {
        self.traffic.entry(who.to_string()).or_default()
    }

    fn key(&self, dir: Direction) -> String {
        routing_key(&self.scenario.job, dir)
    }

    fn direct_key(&self, id: &str) -> String {
        format!("{}.{id}", self.key(Direction::ToWorkers))
    }

    fn publish(&mut self, publisher: &str, key: &str, payload: &[u8]) {
        let receipts = self
            .broker
            .publish_at(self.now, publisher, key, payload)
            .expect("simulator payloads are nonempty");
        let t = self.traffic(publisher);
        t.messages_up += 1;
        t.bytes_up += payload.len() as u64;
        for r in receipts {
            self.schedule(r.deliver_at, Action::Deliver(r.queue));
        }
    }

    fn publish_wire(&mut self, publisher: &str, key: &str, msg: WireMessage) {
        match wire::encode(&msg) {
            Ok(bytes) => self.publish(publisher, key, &bytes),
            Err(e) => tracing::error!(error = %e, "refusing to publish invalid message"),
        }
    }

    fn publish_metric(&mut self, source: &str, kind: MetricKind, value: f64, version: Option<u64>, epoch: Option<u64>) {
        let ev = MetricEvent {
            source_id: source.to_string(),
            time: self.now,
            kind,
            value,
            version,
            epoch,
        };
        match ev.encode() {
            Ok(bytes) => {
                let key = self.key(Direction::Metrics);
                self.publish(source, &key, &bytes);
            }
            Err(e) => tracing::warn!(error = %e, "metric not published"),
        }
    }

    /// Processes the next scheduled action. Returns false once the run is
    /// over.
    pub fn step(&mut self) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        let commands = self.monitor.lock().expect("monitor lock").take_commands();
        for cmd in commands {
            let key = self.key(Direction::Control);
            self.publish(MONITOR, &key, &cmd.encode());
        }
        let Some(((at, _), action)) = self.actions.pop_first() else {
            self.finished = true;
            self.complete = self.server.is_stopped();
            return Ok(false);
        };
        if at.0 > self.scenario.duration {
            tracing::warn!(budget = self.scenario.duration, "time budget exhausted");
            self.finished = true;
            self.complete = self.server.is_stopped();
            return Ok(false);
        }
        self.now = at.0;
        match action {
            Action::Join(i) => self.join(i),
            Action::JoinTester => self.join_tester(),
            Action::BatchDone(i) => self.batch_done(i)?,
            Action::Fail(i) => self.halt(i, LeaveReason::Failure),
            Action::Deliver(queue) => self.deliver(&queue)?,
            Action::Tick => self.tick()?,
        }
        Ok(true)
    }

    pub fn run(mut self) -> Result<SimOutcome> {
        while self.step()? {}
        Ok(self.finish())
    }

    fn finish(self) -> SimOutcome {
        let metrics = Metrics::from_run(&self.log, &self.tested, &self.traffic);
        SimOutcome {
            final_record: self.server.global().clone(),
            metrics,
            complete: self.complete,
            end_time: self.now,
            payloads: self.broker.recorded_payloads().to_vec(),
            objects: self.store.puts().to_vec(),
            log: self.log,
        }
    }

    fn join(&mut self, i: usize) {
        if self.server.is_stopped() {
            return;
        }
        let id = self.workers[i].profile.worker_id.clone();
        let job = self.scenario.job.clone();
        let direct = self.direct_key(&id);
        for (q, key) in [
            (id.clone(), routing_key(&job, Direction::ToWorkers)),
            (format!("{id}.direct"), direct),
            (format!("{id}.control"), routing_key(&job, Direction::Control)),
        ] {
            self.broker
                .subscribe(&q, &key)
                .expect("worker queues are unique");
        }
        self.workers[i].joined = true;
        self.record(EventKind::Join {
            worker: id.clone(),
            role: Role::Trainer,
        });
        let msg = self.workers[i]
            .worker
            .init_message(&self.workers[i].session, self.now);
        let key = self.key(Direction::ToServer);
        self.publish_wire(&id, &key, msg.into());
        self.publish_metric(&id, MetricKind::Join, 1.0, None, None);
    }

    fn join_tester(&mut self) {
        let job = self.scenario.job.clone();
        let direct = self.direct_key(TESTER);
        for (q, key) in [
            (TESTER.to_string(), routing_key(&job, Direction::ToWorkers)),
            ("tester.direct".to_string(), direct),
            ("tester.control".to_string(), routing_key(&job, Direction::Control)),
        ] {
            self.broker.subscribe(&q, &key).expect("tester queues are unique");
        }
        let slot = self.tester.as_mut().expect("tester configured");
        slot.joined = true;
        let msg = slot.tester.init_message("tester-session", self.now);
        self.record(EventKind::Join {
            worker: TESTER.into(),
            role: Role::Tester,
        });
        let key = self.key(Direction::ToServer);
        self.publish_wire(TESTER, &key, msg.into());
    }

    fn halt(&mut self, i: usize, reason: LeaveReason) {
        let slot = &mut self.workers[i];
        if slot.halted || !slot.joined {
            slot.halted = true;
            return;
        }
        slot.halted = true;
        slot.busy = false;
        let id = slot.profile.worker_id.clone();
        self.record(EventKind::Leave {
            worker: id.clone(),
            reason,
        });
        self.publish_metric(&id, MetricKind::Leave, 1.0, None, None);
    }

    fn start_batch(&mut self, i: usize) -> Result<()> {
        let now = self.now;
        let slot = &mut self.workers[i];
        if slot.halted || slot.busy || !slot.started {
            return Ok(());
        }
        let adoption = slot.worker.at_batch_boundary()?;
        if slot.worker.awaiting_global {
            return Ok(());
        }
        if slot.worker.state.batch_index == 0 {
            slot.epoch_start = now;
        }
        slot.busy = true;
        let at = now + slot.profile.batch_cost;
        let id = slot.profile.worker_id.clone();
        if let Some(a) = adoption {
            self.record(EventKind::Adopt {
                worker: id,
                version: a.version,
                previous: a.previous_version,
                mode: a.mode,
                lr: a.learning_rate,
            });
        }
        self.schedule(at, Action::BatchDone(i));
        Ok(())
    }

    fn batch_done(&mut self, i: usize) -> Result<()> {
        if self.workers[i].halted {
            return Ok(());
        }
        self.workers[i].busy = false;
        let b = self.workers[i].worker.train_next_batch()?;
        let id = self.workers[i].profile.worker_id.clone();
        self.record(EventKind::BatchDone {
            worker: id.clone(),
            epoch: b.epoch,
            batch: b.batch,
            version: b.global_version,
            lr: b.lr,
            loss: b.loss,
        });
        if self.workers[i].worker.epoch_complete() {
            let slot = &mut self.workers[i];
            let out = slot
                .worker
                .finish_epoch(&slot.session, self.now, &mut self.store)?;
            let started = slot.epoch_start;
            self.record(EventKind::EpochDone {
                worker: id.clone(),
                epoch: out.epoch,
                started,
                loss: out.loss,
                performance: out.performance,
                version_used: out.global_version_used,
                submitted: out.notify.is_some(),
            });
            if let Some(e) = &out.upload_error {
                self.record(EventKind::UploadFailed {
                    worker: id.clone(),
                    epoch: out.epoch,
                    error: e.to_string(),
                });
            }
            self.traffic(&id).bytes_up += out.uploaded_bytes;
            if let Some(n) = out.notify {
                let key = self.key(Direction::ToServer);
                self.publish_wire(&id, &key, n.into());
            }
            let epoch = Some(out.epoch);
            let version = Some(out.global_version_used);
            self.publish_metric(&id, MetricKind::WorkerLoss, out.loss, version, epoch);
            self.publish_metric(&id, MetricKind::WorkerPerf, out.performance, version, epoch);
            self.publish_metric(&id, MetricKind::EpochTime, self.now - started, version, epoch);
            if out.uploaded_bytes > 0 {
                self.publish_metric(&id, MetricKind::Bytes, out.uploaded_bytes as f64, version, epoch);
            }
        }
        self.start_batch(i)
    }

    fn fetch_global(&mut self, who: &str, version: u64) -> Option<ParameterVector> {
        let path = self.scenario.server.global_path(version);
        let key = ObjectKey::new(&self.scenario.server.bucket, path).ok()?;
        match self.store.get(&key) {
            Ok(bytes) => {
                self.traffic(who).bytes_down += bytes.len() as u64;
                decode_weights(&bytes).ok()
            }
            Err(e) => {
                // superseded and collected before this download; a newer
                // notification is already on its way
                tracing::debug!(who, version, error = %e, "global model no longer available");
                None
            }
        }
    }

    fn deliver(&mut self, queue: &str) -> Result<()> {
        let d = self
            .broker
            .poll_ready(queue, self.now)
            .map_err(|e| Error::Storage(e.to_string()))?
            .expect("a delivery action exists for every receipt");
        let owner = queue.split('.').next().unwrap_or(queue).to_string();
        self.traffic(&owner).messages_down += 1;
        let message = describe(&d.payload);
        self.record(EventKind::MsgDelivered {
            queue: queue.to_string(),
            publisher: d.publisher.clone(),
            message,
            published_at: d.published_at,
            bytes: d.payload.len(),
        });
        match queue {
            SERVER => self.server_inbound(&d.payload),
            "server.control" => self.server_control(&d.publisher, &d.payload),
            "server.metrics" => {
                if let Ok(ev) = MetricEvent::decode(&d.payload) {
                    if ev.kind == MetricKind::GlobalPerf {
                        if let Some(version) = ev.version {
                            self.server.record_tester_report(TesterReport {
                                version,
                                performance: ev.value,
                                time: ev.time,
                            });
                        }
                    }
                }
                Ok(())
            }
            MONITOR => {
                let res = self
                    .monitor
                    .lock()
                    .expect("monitor lock")
                    .ingest_bytes(&d.payload);
                if res.is_ok() {
                    let ev = MetricEvent::decode(&d.payload).expect("just ingested");
                    self.record(EventKind::Metric { event: ev });
                }
                Ok(())
            }
            _ if owner == TESTER => self.tester_inbound(queue, &d.payload),
            _ => {
                let i = self
                    .workers
                    .iter()
                    .position(|w| w.profile.worker_id == owner)
                    .expect("queue belongs to a worker");
                self.worker_inbound(i, queue, &d.payload)
            }
        }
    }

    fn server_inbound(&mut self, payload: &[u8]) -> Result<()> {
        let msg = match wire::decode(payload) {
            Ok(m) => m,
            Err(e) => {
                tracing::warn!(error = %e, "server dropped undecodable message");
                return Ok(());
            }
        };
        match msg {
            WireMessage::WorkerInit(m) => {
                if self.server.is_stopped() {
                    return Ok(());
                }
                let resp = self.server.handle_worker_init(&m, self.now);
                let key = self.direct_key(&m.headers.worker_id);
                self.publish_wire(SERVER, &key, resp.into());
            }
            WireMessage::WorkerNotify(m) => {
                let before = self.store.stats().bytes_out;
                let outcome = self.server.handle_worker_notify(&m, self.now, &mut self.store);
                let fetched = self.store.stats().bytes_out - before;
                self.traffic(SERVER).bytes_down += fetched;
                match outcome {
                    Ok(SubmissionOutcome::Queued) => {}
                    Ok(other) => tracing::debug!(?other, "submission not queued"),
                    Err(e) => tracing::warn!(error = %e, "submission rejected"),
                }
            }
            other => tracing::warn!(kind = ?other.message_type(), "unexpected message at server"),
        }
        Ok(())
    }

    fn server_control(&mut self, publisher: &str, payload: &[u8]) -> Result<()> {
        if publisher == SERVER {
            return Ok(());
        }
        let Ok(cmd) = ControlCommand::decode(payload) else {
            tracing::warn!("undecodable control command dropped");
            return Ok(());
        };
        let was_stopped = self.server.is_stopped();
        let ack = self.server.handle_control(&cmd, &mut self.store)?;
        self.record(EventKind::Control {
            cmd: cmd.clone(),
            ack,
        });
        if matches!(cmd, ControlCommand::StopTraining) && !was_stopped {
            self.after_stop("control");
        }
        Ok(())
    }

    fn tester_inbound(&mut self, queue: &str, payload: &[u8]) -> Result<()> {
        if queue == "tester.control" {
            if let Ok(ControlCommand::StopTraining) = ControlCommand::decode(payload) {
                if let Some(t) = self.tester.as_mut() {
                    t.halted = true;
                }
            }
            return Ok(());
        }
        let Ok(WireMessage::ServerNotify(m)) = wire::decode(payload) else {
            return Ok(());
        };
        if self.tester.as_ref().is_none_or(|t| t.halted) {
            return Ok(());
        }
        let version = m.content.global_model.version;
        let Some(weights) = self.fetch_global(TESTER, version) else {
            return Ok(());
        };
        let slot = self.tester.as_mut().expect("checked above");
        if let Some(ev) = slot.tester.evaluate(version, &weights)? {
            self.tested.insert(version, (self.now, ev.accuracy, ev.loss));
            self.publish_metric(TESTER, MetricKind::GlobalPerf, ev.accuracy, Some(version), None);
        }
        Ok(())
    }

    fn worker_inbound(&mut self, i: usize, queue: &str, payload: &[u8]) -> Result<()> {
        if self.workers[i].halted {
            return Ok(());
        }
        let id = self.workers[i].profile.worker_id.clone();
        if queue.ends_with(".control") {
            match ControlCommand::decode(payload) {
                Ok(ControlCommand::StopWorker { id: target }) if target == id => {
                    self.halt(i, LeaveReason::Stopped)
                }
                Ok(ControlCommand::StopTraining) => self.halt(i, LeaveReason::TrainingStopped),
                _ => {}
            }
            return Ok(());
        }
        let msg = match wire::decode(payload) {
            Ok(m) => m,
            Err(e) => {
                tracing::warn!(worker = %id, error = %e, "worker dropped undecodable message");
                return Ok(());
            }
        };
        match msg {
            WireMessage::ServerInitResp(m) => {
                let info = &m.content.model_info;
                let w = &mut self.workers[i].worker;
                w.bucket.clone_from(&m.content.storage_info.bucket_name);
                w.exchange_at = info.exchange_at;
                let version = info.version;
                let Some(weights) = self.fetch_global(&id, version) else {
                    return Ok(());
                };
                let lr = self.join_lr(version);
                let mut record = GlobalModelRecord::initial(weights);
                record.version = version;
                let slot = &mut self.workers[i];
                slot.worker.receive_global(record, lr);
                slot.started = true;
                self.start_batch(i)?;
            }
            WireMessage::ServerNotify(m) => {
                if !self.workers[i].started {
                    return Ok(());
                }
                let g = &m.content.global_model;
                let Some(weights) = self.fetch_global(&id, g.version) else {
                    return Ok(());
                };
                let record = GlobalModelRecord {
                    version: g.version,
                    weights,
                    avg_qod: g.avg_qod,
                    total_data_size: g.total_data_size,
                    avg_loss: g.avg_loss,
                    contributors: m.content.worker_id.clone(),
                };
                self.workers[i]
                    .worker
                    .receive_global(record, m.content.learning_rate);
                self.start_batch(i)?;
            }
            other => tracing::warn!(worker = %id, kind = ?other.message_type(), "unexpected message"),
        }
        Ok(())
    }

    /// Rate for a worker joining at `version`, which SERVER_INIT_RESP does
    /// not announce.
    fn join_lr(&self, version: u64) -> Option<f64> {
        let t = &self.scenario.train;
        (t.lr_regime == LrRegime::SyncDecay)
            .then(|| cosine_decay_lr(version, t.decay_steps, t.lr_initial))
    }

    fn tick(&mut self) -> Result<()> {
        if self.server.is_stopped() {
            return Ok(());
        }
        if self.server.check_aggregation_cond(self.now) {
            let next = self.server.version() + 1;
            match self.server.run_aggregation(self.now, &mut self.store) {
                Ok(out) => {
                    let r = &out.record;
                    self.record(EventKind::Aggregation {
                        version: r.version,
                        shares: out.shares.clone(),
                        avg_qod: r.avg_qod,
                        avg_loss: r.avg_loss,
                        total_data_size: r.total_data_size,
                        learning_rate: out.learning_rate,
                    });
                    let key = self.key(Direction::ToWorkers);
                    self.publish_wire(SERVER, &key, out.notify.into());
                }
                Err(e) => self.record(EventKind::AggregationSkipped {
                    version: next,
                    reason: e.to_string(),
                }),
            }
        }
        if self.server.check_stop_condition(self.now) {
            self.server.stop(&mut self.store)?;
            let key = self.key(Direction::Control);
            self.publish(SERVER, &key, &ControlCommand::StopTraining.encode());
            self.after_stop("condition");
            return Ok(());
        }
        let next = self.now + self.scenario.server.period;
        self.schedule(next, Action::Tick);
        Ok(())
    }

    fn after_stop(&mut self, reason: &str) {
        self.record(EventKind::Stop {
            version: self.server.version(),
            reason: reason.into(),
        });
        self.monitor
            .lock()
            .expect("monitor lock")
            .mark_training_stopped();
    }
}

fn describe(payload: &[u8]) -> String {
    if let Ok(m) = wire::decode(payload) {
        return m.message_type().as_str().to_string();
    }
    if let Ok(c) = ControlCommand::decode(payload) {
        return match c {
            ControlCommand::StopWorker { .. } => "CONTROL_STOP_WORKER".into(),
            ControlCommand::StopTraining => "CONTROL_STOP_TRAINING".into(),
        };
    }
    if MetricEvent::decode(payload).is_ok() {
        return "METRIC".into();
    }
    "UNKNOWN".into()
}

/// Runs a scenario to completion (or budget).
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutcome> {
    Simulation::new(scenario.clone())?.run()
}

/// True iff the two logs are element-wise identical.
pub fn replay_check(a: &[SimEvent], b: &[SimEvent]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x == y && x.time.to_bits() == y.time.to_bits()
        })
}

pub fn write_log<W: Write>(log: &[SimEvent], mut out: W) -> Result<()> {
    for ev in log {
        serde_json::to_writer(&mut out, ev).map_err(|e| Error::Io(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<SimEvent>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(ev);
    }
    Ok(out)
}
