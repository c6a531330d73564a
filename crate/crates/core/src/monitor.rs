//! Metric collection and operator control.
//!
//! [`MetricStore`] is the single writer: it validates and indexes metric
//! events, appends them to an optional JSON-lines journal, and fans them
//! out to bounded live subscribers. It also accepts control commands and
//! holds them until the training loop picks them up.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::server::ControlAck;
use crate::wire::{ControlCommand, MetricEvent, MetricKind, WireError};

/// Default capacity of a live subscriber buffer.
pub const DEFAULT_SUBSCRIBER_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricFilter {
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub kind: Option<MetricKind>,
    /// Inclusive lower time bound.
    #[serde(default)]
    pub from: Option<f64>,
    /// Inclusive upper time bound.
    #[serde(default)]
    pub to: Option<f64>,
}

impl MetricFilter {
    pub fn matches(&self, ev: &MetricEvent) -> bool {
        self.source.as_deref().is_none_or(|s| s == ev.source_id)
            && self.kind.is_none_or(|k| k == ev.kind)
            && self.from.is_none_or(|t| ev.time >= t)
            && self.to.is_none_or(|t| ev.time <= t)
    }
}

#[derive(Debug, Default)]
struct SubscriberBuf {
    queue: VecDeque<MetricEvent>,
    capacity: usize,
    dropped: u64,
    closed: bool,
}

/// Read side of a live subscription. Never blocks the writer: when full,
/// the oldest buffered event is discarded and counted.
#[derive(Debug, Clone)]
pub struct Subscriber(Arc<Mutex<SubscriberBuf>>);

impl Subscriber {
    pub fn try_recv(&self) -> Option<MetricEvent> {
        self.0.lock().expect("subscriber lock").queue.pop_front()
    }

    pub fn drain(&self) -> Vec<MetricEvent> {
        self.0.lock().expect("subscriber lock").queue.drain(..).collect()
    }

    pub fn dropped(&self) -> u64 {
        self.0.lock().expect("subscriber lock").dropped
    }

    pub fn close(&self) {
        self.0.lock().expect("subscriber lock").closed = true;
    }
}

type Sink = Box<dyn Fn(&MetricEvent) + Send>;

#[derive(Default)]
pub struct MetricStore {
    events: Vec<MetricEvent>,
    last_time: BTreeMap<String, f64>,
    dropped: u64,
    journal: Option<BufWriter<File>>,
    subscribers: Vec<Arc<Mutex<SubscriberBuf>>>,
    sinks: Vec<Sink>,
    active_workers: BTreeSet<String>,
    training_stopped: bool,
    outbox: VecDeque<ControlCommand>,
}

impl std::fmt::Debug for MetricStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricStore")
            .field("events", &self.events.len())
            .field("dropped", &self.dropped)
            .field("subscribers", &self.subscribers.len())
            .field("active_workers", &self.active_workers)
            .finish_non_exhaustive()
    }
}

impl MetricStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every accepted event to `path` as one JSON object per line.
    pub fn with_journal(mut self, path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.journal = Some(BufWriter::new(file));
        Ok(self)
    }

    /// Shared handle for use from several contexts.
    pub fn shared(self) -> Arc<Mutex<MetricStore>> {
        Arc::new(Mutex::new(self))
    }

    /// Validates, stores and fans out `event`. Invalid events, and events
    /// older than the last one from the same source, are dropped and
    /// counted.
    pub fn ingest(&mut self, event: MetricEvent) -> std::result::Result<(), WireError> {
        if let Err(e) = event.validate() {
            self.dropped += 1;
            tracing::debug!(error = %e, "malformed metric dropped");
            return Err(e);
        }
        if let Some(&last) = self.last_time.get(&event.source_id) {
            if event.time < last {
                self.dropped += 1;
                return Err(WireError::Validation {
                    field: "time".into(),
                    reason: format!("{} precedes {last} from the same source", event.time),
                });
            }
        }
        self.last_time.insert(event.source_id.clone(), event.time);
        match event.kind {
            MetricKind::Join => {
                self.active_workers.insert(event.source_id.clone());
            }
            MetricKind::Leave => {
                self.active_workers.remove(&event.source_id);
            }
            _ => {}
        }
        if let Some(j) = &mut self.journal {
            let line = serde_json::to_string(&event).expect("metric events serialize");
            if let Err(e) = writeln!(j, "{line}").and_then(|_| j.flush()) {
                tracing::warn!(error = %e, "metric journal write failed");
            }
        }
        self.subscribers.retain(|s| {
            let mut s = s.lock().expect("subscriber lock");
            if s.closed {
                return false;
            }
            if s.queue.len() >= s.capacity {
                s.queue.pop_front();
                s.dropped += 1;
            }
            s.queue.push_back(event.clone());
            true
        });
        for sink in &self.sinks {
            sink(&event);
        }
        self.events.push(event);
        Ok(())
    }

    /// Decodes and ingests a raw payload.
    pub fn ingest_bytes(&mut self, bytes: &[u8]) -> std::result::Result<(), WireError> {
        match MetricEvent::decode(bytes) {
            Ok(ev) => self.ingest(ev),
            Err(e) => {
                self.dropped += 1;
                Err(e)
            }
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events in ingest order.
    pub fn events(&self) -> &[MetricEvent] {
        &self.events
    }

    /// Matching events ordered by time, ties in ingest order.
    pub fn query(&self, filter: &MetricFilter) -> Vec<MetricEvent> {
        let mut out: Vec<MetricEvent> = self
            .events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.time.total_cmp(&b.time));
        out
    }

    pub fn subscribe(&mut self, capacity: usize) -> Subscriber {
        let buf = Arc::new(Mutex::new(SubscriberBuf {
            capacity: capacity.max(1),
            ..SubscriberBuf::default()
        }));
        self.subscribers.push(Arc::clone(&buf));
        Subscriber(buf)
    }

    /// Registers a callback run on every accepted event.
    pub fn add_sink(&mut self, sink: impl Fn(&MetricEvent) + Send + 'static) {
        self.sinks.push(Box::new(sink));
    }

    pub fn active_workers(&self) -> impl Iterator<Item = &str> {
        self.active_workers.iter().map(String::as_str)
    }

    pub fn training_stopped(&self) -> bool {
        self.training_stopped
    }

    /// Marks the run as finished, e.g. when the server stopped on its own.
    pub fn mark_training_stopped(&mut self) {
        self.training_stopped = true;
    }

    /// Accepts an operator command for forwarding to the server.
    pub fn control(&mut self, cmd: ControlCommand) -> ControlAck {
        if self.training_stopped {
            return ControlAck::Error("training is not active".into());
        }
        match &cmd {
            ControlCommand::StopWorker { id } => {
                if !self.active_workers.remove(id) {
                    return ControlAck::Error(format!("unknown worker `{id}`"));
                }
            }
            ControlCommand::StopTraining => self.training_stopped = true,
        }
        self.outbox.push_back(cmd);
        ControlAck::Ok
    }

    /// Commands accepted since the last call, oldest first.
    pub fn take_commands(&mut self) -> Vec<ControlCommand> {
        self.outbox.drain(..).collect()
    }
}

/// Reads a JSON-lines journal back. Malformed lines are an error naming
/// the line number.
pub fn read_journal(path: &Path) -> Result<Vec<MetricEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = MetricEvent::decode(line.as_bytes())
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(ev);
    }
    Ok(out)
}
