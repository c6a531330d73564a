//! The server's side of training: worker registry, aggregation and stop
//! conditions, strategy dispatch and global-model publication.
//!
//! [`Server`] is a plain state machine. The caller (the simulator, or any
//! other event loop) feeds it decoded messages, clock ticks and control
//! commands one at a time and publishes whatever it returns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::schedule::{cosine_decay_lr, LrRegime};
use crate::storage::{decode_weights, encode_weights, ObjectKey, ObjectStore};
use crate::strategy::{
    latest_per_worker, GlobalModelRecord, LocalModelSubmission, Share, Strategy, StrategyConfig,
};
use crate::wire::{
    sim_timestamp, ControlCommand, ExchangeAt, GlobalModelInfo, MessageType, ModelInfo, Role,
    ServerHeaders, ServerInitRespContent, ServerInitRespMsg, ServerNotifyContent,
    ServerNotifyMsg, ServerSessionHeaders, StorageInfo, WorkerInitMsg, WorkerNotifyMsg,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggregationCondition {
    /// Fire once submissions from `n` distinct workers are queued.
    OnCount { n: usize },
    /// Fire every `interval` time units if anything is queued.
    Periodic { interval: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StopCondition {
    pub max_epochs: Option<u64>,
    pub max_duration: Option<f64>,
    pub target_performance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub server_id: String,
    pub model_name: String,
    pub bucket: String,
    pub region: String,
    pub aggregation: AggregationCondition,
    pub stop: StopCondition,
    pub strategy: StrategyConfig,
    pub exchange_at: ExchangeAt,
    /// Only [`LrRegime::SyncDecay`] makes the server announce rates.
    pub lr_regime: LrRegime,
    pub lr_initial: f64,
    pub decay_steps: u64,
    /// Sleep between condition checks in the main loop.
    pub period: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            server_id: "server".into(),
            model_name: "model".into(),
            bucket: "job".into(),
            region: String::new(),
            aggregation: AggregationCondition::OnCount { n: 1 },
            stop: StopCondition {
                max_epochs: Some(100),
                ..StopCondition::default()
            },
            strategy: StrategyConfig::default(),
            exchange_at: ExchangeAt {
                performance: 1.0,
                epoch: 1,
            },
            lr_regime: LrRegime::SyncDecay,
            lr_initial: 0.1,
            decay_steps: 100,
            period: 1.0,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        match self.aggregation {
            AggregationCondition::OnCount { n: 0 } => {
                return Err(Error::param("aggregation", "count trigger needs n >= 1"))
            }
            AggregationCondition::Periodic { interval } if !(interval > 0.0) => {
                return Err(Error::param("aggregation", "period must be positive"))
            }
            _ => {}
        }
        let s = &self.stop;
        if s.max_epochs.is_none() && s.max_duration.is_none() && s.target_performance.is_none() {
            return Err(Error::param("stop", "at least one stop condition is required"));
        }
        if !(self.period > 0.0) {
            return Err(Error::param("period", "must be positive"));
        }
        self.strategy.validate()
    }

    pub fn global_path(&self, version: u64) -> String {
        format!("global-models/{}_v{version}.pkl", self.model_name)
    }

    pub fn final_path(&self) -> String {
        format!("global-models/{}_final.pkl", self.model_name)
    }

    /// Rate announced together with global version `version`.
    pub fn announced_lr(&self, version: u64) -> Option<f64> {
        (self.lr_regime == LrRegime::SyncDecay)
            .then(|| cosine_decay_lr(version, self.decay_steps, self.lr_initial))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProxy {
    pub worker_id: String,
    pub session_id: String,
    pub role: Role,
    pub qod: f64,
    pub data_size: u64,
    pub last_submission: Option<LocalModelSubmission>,
    pub join_time: f64,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TesterReport {
    pub version: u64,
    pub performance: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubmissionOutcome {
    Queued,
    /// Training already stopped; acknowledged and dropped.
    DiscardedAfterStop,
    UnknownWorker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub record: GlobalModelRecord,
    pub shares: Vec<Share>,
    pub notify: ServerNotifyMsg,
    /// Every submission drained from the queue, dedup losers included.
    pub drained: Vec<LocalModelSubmission>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum ControlAck {
    Ok,
    Error(String),
}

pub struct Server {
    config: ServerConfig,
    strategy: Box<dyn Strategy>,
    workers: BTreeMap<String, WorkerProxy>,
    queue: Vec<LocalModelSubmission>,
    global: GlobalModelRecord,
    start_time: f64,
    last_aggregation: f64,
    arrivals: u64,
    stopped: bool,
    tester_reports: Vec<TesterReport>,
    /// Object key of each queued submission, by arrival number.
    local_keys: BTreeMap<u64, ObjectKey>,
}

impl std::fmt::Debug for Server {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Server")
            .field("config", &self.config)
            .field("version", &self.global.version)
            .field("workers", &self.workers.len())
            .field("queue", &self.queue.len())
            .field("stopped", &self.stopped)
            .finish_non_exhaustive()
    }
}

impl Server {
    /// Creates the job bucket and stores the initial model as version 0.
    pub fn new(
        config: ServerConfig,
        initial: ParameterVector,
        store: &mut dyn ObjectStore,
        now: f64,
    ) -> Result<Self> {
        config.validate()?;
        let strategy = config.strategy.build()?;
        store.create_bucket(&config.bucket)?;
        let key = ObjectKey::new(&config.bucket, config.global_path(0))?;
        store.put(&key, &encode_weights(&initial))?;
        Ok(Self {
            strategy,
            workers: BTreeMap::new(),
            queue: Vec::new(),
            global: GlobalModelRecord::initial(initial),
            start_time: now,
            last_aggregation: now,
            arrivals: 0,
            stopped: false,
            tester_reports: Vec::new(),
            local_keys: BTreeMap::new(),
            config,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.global.version
    }

    pub fn global(&self) -> &GlobalModelRecord {
        &self.global
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    pub fn queue(&self) -> &[LocalModelSubmission] {
        &self.queue
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerProxy> {
        self.workers.values()
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerProxy> {
        self.workers.get(id)
    }

    pub fn trainer_count(&self) -> usize {
        self.workers
            .values()
            .filter(|w| w.alive && w.role == Role::Trainer)
            .count()
    }

    fn storage_info(&self) -> StorageInfo {
        StorageInfo {
            access_key: String::new(),
            secret_key: String::new(),
            bucket_name: self.config.bucket.clone(),
            region_name: self.config.region.clone(),
        }
    }

    /// Registers (or refreshes) a worker and tells it where the current
    /// global model lives.
    pub fn handle_worker_init(&mut self, msg: &WorkerInitMsg, now: f64) -> ServerInitRespMsg {
        let id = msg.headers.worker_id.clone();
        let role = msg.content.role;
        if role == Role::Tester {
            // one tester at a time; a new one replaces the old
            self.workers
                .retain(|wid, w| w.role != Role::Tester || *wid == id);
        }
        let desc = &msg.content.data_description;
        let proxy = self.workers.entry(id.clone()).or_insert_with(|| WorkerProxy {
            worker_id: id.clone(),
            session_id: String::new(),
            role,
            qod: desc.qod,
            data_size: desc.size,
            last_submission: None,
            join_time: now,
            alive: true,
        });
        proxy.session_id = msg.headers.session_id.clone();
        proxy.role = role;
        proxy.qod = desc.qod;
        proxy.data_size = desc.size;
        proxy.alive = true;
        tracing::debug!(worker = %id, ?role, "worker registered");

        ServerInitRespMsg {
            headers: ServerSessionHeaders {
                message_type: MessageType::ServerInitResp,
                server_id: self.config.server_id.clone(),
                session_id: msg.headers.session_id.clone(),
                timestamp: sim_timestamp(now),
                extra: Default::default(),
            },
            content: ServerInitRespContent {
                model_info: ModelInfo {
                    url: self.config.global_path(self.global.version),
                    name: self.config.model_name.clone(),
                    version: self.global.version,
                    exchange_at: self.config.exchange_at,
                },
                storage_info: self.storage_info(),
                strategy: self.strategy.kind().as_str().to_string(),
                extra: Default::default(),
            },
            extra: Default::default(),
        }
    }

    /// Downloads the announced local model and queues it.
    pub fn handle_worker_notify(
        &mut self,
        msg: &WorkerNotifyMsg,
        now: f64,
        store: &mut dyn ObjectStore,
    ) -> Result<SubmissionOutcome> {
        if self.stopped {
            return Ok(SubmissionOutcome::DiscardedAfterStop);
        }
        let id = &msg.headers.worker_id;
        let Some(proxy) = self.workers.get(id).filter(|p| p.alive && p.role == Role::Trainer)
        else {
            return Ok(SubmissionOutcome::UnknownWorker);
        };
        let c = &msg.content;
        if c.global_version_used > self.global.version {
            return Err(Error::StalenessInversion {
                new_version: self.global.version,
                used_version: c.global_version_used,
            });
        }
        let key = ObjectKey::parse(&format!("{}/{}", c.storage_path, c.file_name))?;
        let weights = decode_weights(&store.get(&key)?)?;
        weights.ensure_same_len(&self.global.weights)?;
        self.arrivals += 1;
        let sub = LocalModelSubmission {
            worker_id: id.clone(),
            weights,
            loss: c.loss,
            qod: proxy.qod,
            data_size: proxy.data_size,
            global_version_used: c.global_version_used,
            submit_time: now,
            arrival: self.arrivals,
        };
        if let Some(p) = self.workers.get_mut(id) {
            p.last_submission = Some(sub.clone());
        }
        self.local_keys.insert(sub.arrival, key);
        self.queue.push(sub);
        Ok(SubmissionOutcome::Queued)
    }

    pub fn record_tester_report(&mut self, report: TesterReport) {
        self.tester_reports.push(report);
    }

    pub fn tester_reports(&self) -> &[TesterReport] {
        &self.tester_reports
    }

    fn distinct_submitters(&self) -> usize {
        latest_per_worker(&self.queue).len()
    }

    pub fn check_aggregation_cond(&self, now: f64) -> bool {
        if self.stopped || self.queue.is_empty() {
            return false;
        }
        match self.config.aggregation {
            AggregationCondition::OnCount { n } => self.distinct_submitters() >= n,
            AggregationCondition::Periodic { interval } => now - self.last_aggregation >= interval,
        }
    }

    /// Aggregates the queue into the next global version, stores it,
    /// deletes superseded objects and builds the notification. On error the
    /// queue is left untouched.
    pub fn run_aggregation(
        &mut self,
        now: f64,
        store: &mut dyn ObjectStore,
    ) -> Result<AggregationOutcome> {
        let next = self.global.version + 1;
        let agg = match self.strategy.aggregate(&self.queue, next, &self.global) {
            Ok(a) => a,
            Err(e) => {
                tracing::warn!(error = %e, version = next, "aggregation skipped; queue retained");
                return Err(e);
            }
        };
        let bucket = self.config.bucket.clone();
        let key = ObjectKey::new(&bucket, self.config.global_path(next))?;
        store.put(&key, &encode_weights(&agg.record.weights))?;
        store.delete(&ObjectKey::new(&bucket, self.config.global_path(self.global.version))?)?;

        let drained = std::mem::take(&mut self.queue);
        for sub in &drained {
            // local uploads are not needed once aggregated
            if let Some(k) = self.local_keys.remove(&sub.arrival) {
                store.delete(&k)?;
            }
        }
        let learning_rate = self.config.announced_lr(next);
        let notify = self.notify_message(&agg.record, learning_rate, now);
        self.global = agg.record.clone();
        self.last_aggregation = now;
        Ok(AggregationOutcome {
            record: agg.record,
            shares: agg.shares,
            notify,
            drained,
            learning_rate,
        })
    }

    fn notify_message(
        &self,
        record: &GlobalModelRecord,
        learning_rate: Option<f64>,
        now: f64,
    ) -> ServerNotifyMsg {
        ServerNotifyMsg {
            headers: ServerHeaders {
                message_type: MessageType::ServerNotify,
                server_id: self.config.server_id.clone(),
                timestamp: sim_timestamp(now),
                extra: Default::default(),
            },
            content: ServerNotifyContent {
                worker_id: record.contributors.clone(),
                global_model: GlobalModelInfo {
                    id: format!("{}_v{}", self.config.model_name, record.version),
                    version: record.version,
                    name: self.config.model_name.clone(),
                    total_data_size: record.total_data_size,
                    avg_qod: record.avg_qod,
                    avg_loss: record.avg_loss,
                },
                learning_rate,
                extra: Default::default(),
            },
            extra: Default::default(),
        }
    }

    /// Latest tester performance for version `current - 1` or newer.
    fn recent_performance(&self) -> Option<f64> {
        let floor = self.global.version.saturating_sub(1);
        self.tester_reports
            .iter()
            .rev()
            .find(|r| r.version >= floor)
            .map(|r| r.performance)
    }

    pub fn check_stop_condition(&self, now: f64) -> bool {
        let s = &self.config.stop;
        let by_epochs = s.max_epochs.is_some_and(|m| self.global.version >= m);
        let by_time = s.max_duration.is_some_and(|d| now - self.start_time >= d);
        let by_perf = s
            .target_performance
            .zip(self.recent_performance())
            .is_some_and(|(target, perf)| perf >= target);
        by_epochs || by_time || by_perf
    }

    /// Terminal path: stop accepting submissions, keep a final copy of the
    /// global model, and return the broadcast that halts workers.
    pub fn stop(&mut self, store: &mut dyn ObjectStore) -> Result<ControlCommand> {
        if !self.stopped {
            self.stopped = true;
            self.queue.clear();
            let key = ObjectKey::new(&self.config.bucket, self.config.final_path())?;
            store.put(&key, &encode_weights(&self.global.weights))?;
        }
        Ok(ControlCommand::StopTraining)
    }

    /// Operator control. `StopWorker` drops the proxy and anything it still
    /// has queued.
    pub fn handle_control(
        &mut self,
        cmd: &ControlCommand,
        store: &mut dyn ObjectStore,
    ) -> Result<ControlAck> {
        match cmd {
            ControlCommand::StopWorker { id } => {
                if self.workers.remove(id).is_none() {
                    return Ok(ControlAck::Error(format!("unknown worker `{id}`")));
                }
                let keys = &mut self.local_keys;
                self.queue.retain(|s| {
                    let keep = &s.worker_id != id;
                    if !keep {
                        keys.remove(&s.arrival);
                    }
                    keep
                });
                Ok(ControlAck::Ok)
            }
            ControlCommand::StopTraining => {
                self.stop(store)?;
                Ok(ControlAck::Ok)
            }
        }
    }
}
