//! Routing-key publish/subscribe.
//!
//! [`Broker`] is the adapter surface; an AMQP 0-9-1 client can implement it
//! by binding each queue name to its routing key on a direct exchange.
//! [`InMemoryBroker`] is the deterministic backend used by the simulator:
//! every delivery carries a due time (`publish time + link latency`) and
//! queues release messages in `(due time, sequence)` order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use ordered_float::OrderedFloat;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("queue `{0}` is already registered")]
    DuplicateQueue(String),
    #[error("queue `{0}` is not registered")]
    UnknownQueue(String),
    #[error("empty payload")]
    EmptyPayload,
}

/// Direction component of `training.<job_id>.<direction>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ToServer,
    ToWorkers,
    Control,
    Metrics,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::ToServer => "to_server",
            Direction::ToWorkers => "to_workers",
            Direction::Control => "control",
            Direction::Metrics => "metrics",
        }
    }
}

pub fn routing_key(job_id: &str, direction: Direction) -> String {
    format!("training.{job_id}.{}", direction.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub queue: String,
    pub routing_key: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub seq: u64,
    pub routing_key: String,
    pub publisher: String,
    pub payload: Vec<u8>,
    pub published_at: f64,
    pub deliver_at: f64,
}

/// Where and when one published copy will land.
#[derive(Debug, Clone, PartialEq)]
pub struct Receipt {
    pub queue: String,
    pub seq: u64,
    pub deliver_at: f64,
}

pub trait Broker {
    fn subscribe(&mut self, queue: &str, routing_key: &str) -> Result<Subscription, BrokerError>;

    fn unsubscribe(&mut self, queue: &str) -> Result<(), BrokerError>;

    /// Enqueues `payload` for every current subscriber of `routing_key`
    /// and returns how many there were.
    fn publish(&mut self, routing_key: &str, payload: &[u8]) -> Result<usize, BrokerError>;

    /// Next message ready for `queue`, if any.
    fn poll(&mut self, queue: &str) -> Result<Option<Delivery>, BrokerError>;
}

/// Per-link delay between a publisher and a subscriber queue.
pub trait LinkLatency: Send {
    fn latency(&self, publisher: &str, queue: &str) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroLatency;

impl LinkLatency for ZeroLatency {
    fn latency(&self, _: &str, _: &str) -> f64 {
        0.0
    }
}

impl<F> LinkLatency for F
where
    F: Fn(&str, &str) -> f64 + Send,
{
    fn latency(&self, publisher: &str, queue: &str) -> f64 {
        self(publisher, queue)
    }
}

type DueKey = (OrderedFloat<f64>, u64);

pub struct InMemoryBroker {
    bindings: BTreeMap<String, BTreeSet<String>>,
    queues: BTreeMap<String, BTreeMap<DueKey, Delivery>>,
    latency: Box<dyn LinkLatency>,
    now: f64,
    next_seq: u64,
    publisher: String,
    tap: Option<Vec<Vec<u8>>>,
}

impl Default for InMemoryBroker {
    fn default() -> Self {
        Self::new(Box::new(ZeroLatency))
    }
}

impl std::fmt::Debug for InMemoryBroker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InMemoryBroker")
            .field("bindings", &self.bindings)
            .field("now", &self.now)
            .field("next_seq", &self.next_seq)
            .finish_non_exhaustive()
    }
}

impl InMemoryBroker {
    pub fn new(latency: Box<dyn LinkLatency>) -> Self {
        Self {
            bindings: BTreeMap::new(),
            queues: BTreeMap::new(),
            latency,
            now: 0.0,
            next_seq: 0,
            publisher: String::new(),
            tap: None,
        }
    }

    /// Keeps a copy of every published payload for later inspection.
    pub fn record_payloads(mut self) -> Self {
        self.tap = Some(Vec::new());
        self
    }

    pub fn recorded_payloads(&self) -> &[Vec<u8>] {
        self.tap.as_deref().unwrap_or(&[])
    }

    pub fn set_clock(&mut self, now: f64) {
        self.now = now;
    }

    pub fn clock(&self) -> f64 {
        self.now
    }

    /// Publisher identity used by [`Broker::publish`] for latency lookup.
    pub fn set_publisher(&mut self, publisher: &str) {
        publisher.clone_into(&mut self.publisher);
    }

    /// Timed publish: each subscriber copy is due at
    /// `now + latency(publisher, queue)`.
    pub fn publish_at(
        &mut self,
        now: f64,
        publisher: &str,
        routing_key: &str,
        payload: &[u8],
    ) -> Result<Vec<Receipt>, BrokerError> {
        if payload.is_empty() {
            return Err(BrokerError::EmptyPayload);
        }
        if let Some(tap) = &mut self.tap {
            tap.push(payload.to_vec());
        }
        let Some(queues) = self.bindings.get(routing_key) else {
            return Ok(Vec::new());
        };
        let mut receipts = Vec::with_capacity(queues.len());
        for queue in queues {
            let seq = self.next_seq;
            self.next_seq += 1;
            let deliver_at = now + self.latency.latency(publisher, queue).max(0.0);
            let delivery = Delivery {
                seq,
                routing_key: routing_key.to_string(),
                publisher: publisher.to_string(),
                payload: payload.to_vec(),
                published_at: now,
                deliver_at,
            };
            self.queues
                .get_mut(queue)
                .expect("bound queues exist")
                .insert((OrderedFloat(deliver_at), seq), delivery);
            receipts.push(Receipt {
                queue: queue.clone(),
                seq,
                deliver_at,
            });
        }
        Ok(receipts)
    }

    /// Earliest message on `queue` due at or before `now`.
    pub fn poll_ready(&mut self, queue: &str, now: f64) -> Result<Option<Delivery>, BrokerError> {
        let pending = self
            .queues
            .get_mut(queue)
            .ok_or_else(|| BrokerError::UnknownQueue(queue.to_string()))?;
        match pending.first_key_value() {
            Some((&(due, _), _)) if due.0 <= now => Ok(pending.pop_first().map(|(_, d)| d)),
            _ => Ok(None),
        }
    }

    pub fn pending(&self, queue: &str) -> usize {
        self.queues.get(queue).map_or(0, BTreeMap::len)
    }

    pub fn queue_names(&self) -> impl Iterator<Item = &str> {
        self.queues.keys().map(String::as_str)
    }
}

impl Broker for InMemoryBroker {
    fn subscribe(&mut self, queue: &str, routing_key: &str) -> Result<Subscription, BrokerError> {
        if self.queues.contains_key(queue) {
            return Err(BrokerError::DuplicateQueue(queue.to_string()));
        }
        self.queues.insert(queue.to_string(), BTreeMap::new());
        self.bindings
            .entry(routing_key.to_string())
            .or_default()
            .insert(queue.to_string());
        Ok(Subscription {
            queue: queue.to_string(),
            routing_key: routing_key.to_string(),
        })
    }

    fn unsubscribe(&mut self, queue: &str) -> Result<(), BrokerError> {
        if self.queues.remove(queue).is_none() {
            return Err(BrokerError::UnknownQueue(queue.to_string()));
        }
        for qs in self.bindings.values_mut() {
            qs.remove(queue);
        }
        Ok(())
    }

    fn publish(&mut self, routing_key: &str, payload: &[u8]) -> Result<usize, BrokerError> {
        let publisher = std::mem::take(&mut self.publisher);
        let res = self.publish_at(self.now, &publisher, routing_key, payload);
        self.publisher = publisher;
        res.map(|r| r.len())
    }

    fn poll(&mut self, queue: &str) -> Result<Option<Delivery>, BrokerError> {
        self.poll_ready(queue, self.now)
    }
}

/// Shared handle; the mutex serializes every publish into one stream.
impl<B: Broker> Broker for Arc<Mutex<B>> {
    fn subscribe(&mut self, queue: &str, routing_key: &str) -> Result<Subscription, BrokerError> {
        self.lock().expect("broker lock").subscribe(queue, routing_key)
    }

    fn unsubscribe(&mut self, queue: &str) -> Result<(), BrokerError> {
        self.lock().expect("broker lock").unsubscribe(queue)
    }

    fn publish(&mut self, routing_key: &str, payload: &[u8]) -> Result<usize, BrokerError> {
        self.lock().expect("broker lock").publish(routing_key, payload)
    }

    fn poll(&mut self, queue: &str) -> Result<Option<Delivery>, BrokerError> {
        self.lock().expect("broker lock").poll(queue)
    }
}
