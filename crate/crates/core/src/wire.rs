//! JSON control messages exchanged between server and workers, plus the
//! metric and control payloads carried on the same broker.
//!
//! Encoding is UTF-8 JSON with lexicographically sorted keys, so equal
//! messages always encode to identical bytes. Fields the decoder does not
//! know are kept in `extra` maps and re-emitted on encode.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Parse(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("invalid field `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> WireError {
    WireError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageType {
    WorkerInit,
    ServerInitResp,
    ServerNotify,
    WorkerNotify,
}

impl MessageType {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageType::WorkerInit => "WORKER_INIT",
            MessageType::ServerInitResp => "SERVER_INIT_RESP",
            MessageType::ServerNotify => "SERVER_NOTIFY",
            MessageType::WorkerNotify => "WORKER_NOTIFY",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "WORKER_INIT" => Some(MessageType::WorkerInit),
            "SERVER_INIT_RESP" => Some(MessageType::ServerInitResp),
            "SERVER_NOTIFY" => Some(MessageType::ServerNotify),
            "WORKER_NOTIFY" => Some(MessageType::WorkerNotify),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Trainer,
    Tester,
}

/// Headers of worker-originated messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerHeaders {
    pub message_type: MessageType,
    pub worker_id: String,
    pub session_id: String,
    pub timestamp: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Headers of the server's reply to a worker session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSessionHeaders {
    pub message_type: MessageType,
    pub server_id: String,
    pub session_id: String,
    pub timestamp: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Headers of server broadcasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerHeaders {
    pub message_type: MessageType,
    pub server_id: String,
    pub timestamp: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemInfo {
    pub cpu: String,
    pub gpu: String,
    pub ram: String,
    pub disk: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDescription {
    pub size: u64,
    pub qod: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInitContent {
    pub role: Role,
    pub system_info: SystemInfo,
    pub data_description: DataDescription,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerInitMsg {
    pub headers: WorkerHeaders,
    pub content: WorkerInitContent,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Thresholds a worker must pass before it starts uploading local models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExchangeAt {
    pub performance: f64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub url: String,
    pub name: String,
    pub version: u64,
    pub exchange_at: ExchangeAt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageInfo {
    pub access_key: String,
    pub secret_key: String,
    pub bucket_name: String,
    pub region_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInitRespContent {
    pub model_info: ModelInfo,
    pub storage_info: StorageInfo,
    pub strategy: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInitRespMsg {
    pub headers: ServerSessionHeaders,
    pub content: ServerInitRespContent,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModelInfo {
    pub id: String,
    pub version: u64,
    pub name: String,
    pub total_data_size: u64,
    pub avg_qod: f64,
    pub avg_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerNotifyContent {
    pub worker_id: Vec<String>,
    pub global_model: GlobalModelInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerNotifyMsg {
    pub headers: ServerHeaders,
    pub content: ServerNotifyContent,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerNotifyContent {
    pub storage_path: String,
    pub file_name: String,
    pub global_version_used: u64,
    pub performance: f64,
    pub loss: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerNotifyMsg {
    pub headers: WorkerHeaders,
    pub content: WorkerNotifyContent,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    WorkerInit(WorkerInitMsg),
    ServerInitResp(ServerInitRespMsg),
    ServerNotify(ServerNotifyMsg),
    WorkerNotify(WorkerNotifyMsg),
}

impl WireMessage {
    pub fn message_type(&self) -> MessageType {
        match self {
            WireMessage::WorkerInit(_) => MessageType::WorkerInit,
            WireMessage::ServerInitResp(_) => MessageType::ServerInitResp,
            WireMessage::ServerNotify(_) => MessageType::ServerNotify,
            WireMessage::WorkerNotify(_) => MessageType::WorkerNotify,
        }
    }

    fn declared_type(&self) -> MessageType {
        match self {
            WireMessage::WorkerInit(m) => m.headers.message_type,
            WireMessage::ServerInitResp(m) => m.headers.message_type,
            WireMessage::ServerNotify(m) => m.headers.message_type,
            WireMessage::WorkerNotify(m) => m.headers.message_type,
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.declared_type() != self.message_type() {
            return Err(invalid("headers.message_type", "does not match message body"));
        }
        match self {
            WireMessage::WorkerInit(m) => {
                check_timestamp(&m.headers.timestamp)?;
                let d = &m.content.data_description;
                check_unit_open(d.qod, "content.data_description.qod")?;
                if m.content.role == Role::Trainer && d.size == 0 {
                    return Err(invalid("content.data_description.size", "trainers need data"));
                }
                nonempty(&m.headers.worker_id, "headers.worker_id")
            }
            WireMessage::ServerInitResp(m) => {
                check_timestamp(&m.headers.timestamp)?;
                let ex = &m.content.model_info.exchange_at;
                check_unit_closed(ex.performance, "content.model_info.exchange_at.performance")?;
                if ex.epoch == 0 {
                    return Err(invalid("content.model_info.exchange_at.epoch", "must be positive"));
                }
                match m.content.strategy.as_str() {
                    "asyn2f" | "fedavg" | "mstep_kafl" => Ok(()),
                    other => Err(invalid("content.strategy", format!("unknown strategy `{other}`"))),
                }
            }
            WireMessage::ServerNotify(m) => {
                check_timestamp(&m.headers.timestamp)?;
                let g = &m.content.global_model;
                check_unit_open(g.avg_qod, "content.global_model.avg_qod")?;
                if !(g.avg_loss.is_finite() && g.avg_loss >= 0.0) {
                    return Err(invalid("content.global_model.avg_loss", "must be finite and >= 0"));
                }
                // the cosine schedule reaches 0 at its final step
                if let Some(lr) = m.content.learning_rate {
                    if !(lr.is_finite() && lr >= 0.0) {
                        return Err(invalid("content.learning_rate", "must be finite and >= 0"));
                    }
                }
                Ok(())
            }
            WireMessage::WorkerNotify(m) => {
                check_timestamp(&m.headers.timestamp)?;
                let c = &m.content;
                nonempty(&c.storage_path, "content.storage_path")?;
                nonempty(&c.file_name, "content.file_name")?;
                if c.file_name.contains('/') {
                    return Err(invalid("content.file_name", "must not contain `/`"));
                }
                check_unit_closed(c.performance, "content.performance")?;
                if !(c.loss.is_finite() && c.loss >= 0.0) {
                    return Err(invalid("content.loss", "must be finite and >= 0"));
                }
                nonempty(&m.headers.worker_id, "headers.worker_id")
            }
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            WireMessage::WorkerInit(m) => serde_json::to_value(m),
            WireMessage::ServerInitResp(m) => serde_json::to_value(m),
            WireMessage::ServerNotify(m) => serde_json::to_value(m),
            WireMessage::WorkerNotify(m) => serde_json::to_value(m),
        };
        v.expect("wire structs always serialize")
    }
}

impl From<WorkerInitMsg> for WireMessage {
    fn from(m: WorkerInitMsg) -> Self {
        WireMessage::WorkerInit(m)
    }
}

impl From<ServerInitRespMsg> for WireMessage {
    fn from(m: ServerInitRespMsg) -> Self {
        WireMessage::ServerInitResp(m)
    }
}

impl From<ServerNotifyMsg> for WireMessage {
    fn from(m: ServerNotifyMsg) -> Self {
        WireMessage::ServerNotify(m)
    }
}

impl From<WorkerNotifyMsg> for WireMessage {
    fn from(m: WorkerNotifyMsg) -> Self {
        WireMessage::WorkerNotify(m)
    }
}

fn nonempty(s: &str, field: &str) -> Result<(), WireError> {
    if s.is_empty() {
        return Err(invalid(field, "must not be empty"));
    }
    Ok(())
}

fn check_unit_open(v: f64, field: &str) -> Result<(), WireError> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(invalid(field, format!("{v} not in (0, 1]")));
    }
    Ok(())
}

fn check_unit_closed(v: f64, field: &str) -> Result<(), WireError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(field, format!("{v} not in [0, 1]")));
    }
    Ok(())
}

fn check_timestamp(ts: &str) -> Result<(), WireError> {
    chrono::NaiveDateTime::parse_from_str(ts, TIMESTAMP_FORMAT)
        .map(|_| ())
        .map_err(|_| invalid("headers.timestamp", format!("`{ts}` is not YYYY-MM-DD HH:MM:SS")))
}

/// Renders simulated seconds as a wall-clock style timestamp offset from
/// the Unix epoch.
pub fn sim_timestamp(seconds: f64) -> String {
    let secs = seconds.max(0.0).floor() as i64;
    chrono::DateTime::from_timestamp(secs, 0)
        .expect("simulated time within chrono range")
        .naive_utc()
        .format(TIMESTAMP_FORMAT)
        .to_string()
}

/// Validates and encodes a message as sorted-key JSON.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    Ok(serde_json::to_vec(&msg.to_value()).expect("JSON values always serialize"))
}

/// Parses, dispatches on `headers.message_type`, and validates.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, WireError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| WireError::Parse(e.to_string()))?;
    let kind = value
        .get("headers")
        .and_then(|h| h.get("message_type"))
        .and_then(Value::as_str)
        .ok_or_else(|| WireError::Protocol("missing headers.message_type".into()))?;
    let kind = MessageType::parse(kind)
        .ok_or_else(|| WireError::Protocol(format!("unknown message_type `{kind}`")))?;
    let msg = match kind {
        MessageType::WorkerInit => WireMessage::WorkerInit(from_value(value)?),
        MessageType::ServerInitResp => WireMessage::ServerInitResp(from_value(value)?),
        MessageType::ServerNotify => WireMessage::ServerNotify(from_value(value)?),
        MessageType::WorkerNotify => WireMessage::WorkerNotify(from_value(value)?),
    };
    msg.validate()?;
    Ok(msg)
}

fn from_value<T: DeserializeOwned>(value: Value) -> Result<T, WireError> {
    serde_json::from_value(value).map_err(|e| WireError::Parse(e.to_string()))
}

/// Rejects a server-notify stream whose versions do not strictly increase.
#[derive(Debug, Default, Clone)]
pub struct NotifyMonotonicity {
    last: Option<u64>,
}

impl NotifyMonotonicity {
    pub fn observe(&mut self, msg: &ServerNotifyMsg) -> Result<(), WireError> {
        let v = msg.content.global_model.version;
        if let Some(last) = self.last {
            if v <= last {
                return Err(invalid(
                    "content.global_model.version",
                    format!("{v} does not exceed previously notified {last}"),
                ));
            }
        }
        self.last = Some(v);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    WorkerLoss,
    WorkerPerf,
    GlobalPerf,
    EpochTime,
    Join,
    Leave,
    Bytes,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::WorkerLoss => "worker_loss",
            MetricKind::WorkerPerf => "worker_perf",
            MetricKind::GlobalPerf => "global_perf",
            MetricKind::EpochTime => "epoch_time",
            MetricKind::Join => "join",
            MetricKind::Leave => "leave",
            MetricKind::Bytes => "bytes",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, WireError> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| invalid("kind", format!("unknown metric kind `{s}`")))
    }
}

/// One monitoring sample. `time` is in (simulated) seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub source_id: String,
    pub time: f64,
    pub kind: MetricKind,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
}

impl MetricEvent {
    pub fn validate(&self) -> Result<(), WireError> {
        nonempty(&self.source_id, "source_id")?;
        if !(self.time.is_finite() && self.time >= 0.0) {
            return Err(invalid("time", "must be finite and >= 0"));
        }
        if !self.value.is_finite() {
            return Err(invalid("value", "must be finite"));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.validate()?;
        let v = serde_json::to_value(self).expect("metric events serialize");
        Ok(serde_json::to_vec(&v).expect("JSON values always serialize"))
    }

    pub fn decode(bytes: &[u8]) -> Result<MetricEvent, WireError> {
        let ev: MetricEvent =
            serde_json::from_slice(bytes).map_err(|e| WireError::Parse(e.to_string()))?;
        ev.validate()?;
        Ok(ev)
    }
}

/// Operator commands accepted on the control routing key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum ControlCommand {
    StopWorker { id: String },
    StopTraining,
}

impl ControlCommand {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("control commands serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<ControlCommand, WireError> {
        serde_json::from_slice(bytes).map_err(|e| WireError::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn notify(version: u64) -> ServerNotifyMsg {
        ServerNotifyMsg {
            headers: ServerHeaders {
                message_type: MessageType::ServerNotify,
                server_id: "s".into(),
                timestamp: sim_timestamp(0.0),
                extra: Map::new(),
            },
            content: ServerNotifyContent {
                worker_id: vec![],
                global_model: GlobalModelInfo {
                    id: "g".into(),
                    version,
                    name: "m".into(),
                    total_data_size: 1,
                    avg_qod: 1.0,
                    avg_loss: 1.0,
                },
                learning_rate: None,
                extra: Map::new(),
            },
            extra: Map::new(),
        }
    }

    #[test]
    fn sim_timestamps_render() {
        assert_eq!(sim_timestamp(0.0), "1970-01-01 00:00:00");
        assert_eq!(sim_timestamp(61.7), "1970-01-01 00:01:01");
    }

    #[test]
    fn unknown_type_is_protocol_error() {
        let text = br#"{"headers":{"message_type":"HELLO"},"content":{}}"#;
        assert!(matches!(decode(text), Err(WireError::Protocol(_))));
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(decode(b"{not json"), Err(WireError::Parse(_))));
    }

    #[test]
    fn mismatched_declared_type_fails_validation() {
        let mut m = notify(1);
        m.headers.message_type = MessageType::WorkerInit;
        assert!(encode(&m.into()).is_err());
    }

    #[test]
    fn monotonicity_checker() {
        let mut mono = NotifyMonotonicity::default();
        mono.observe(&notify(1)).unwrap();
        mono.observe(&notify(2)).unwrap();
        assert!(mono.observe(&notify(2)).is_err());
    }

    #[test]
    fn control_commands_use_cmd_tag() {
        let stop = ControlCommand::StopWorker { id: "id001".into() };
        assert_eq!(stop.encode(), br#"{"cmd":"stop_worker","id":"id001"}"#);
        assert_eq!(
            ControlCommand::decode(br#"{"cmd":"stop_training"}"#).unwrap(),
            ControlCommand::StopTraining
        );
    }

    #[test]
    fn metric_event_rejects_nan() {
        let ev = MetricEvent {
            source_id: "w".into(),
            time: 0.0,
            kind: MetricKind::WorkerLoss,
            value: f64::NAN,
            version: None,
            epoch: None,
        };
        assert!(ev.encode().is_err());
    }
}
