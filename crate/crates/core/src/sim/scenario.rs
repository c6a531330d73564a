//! Scenario description and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! seed = 1
//! duration = 5000
//! data.n = 2000
//! data.split = disjoint_noniid
//! strategy = asyn2f
//! server.aggregation = count:3
//! workers = 5
//! worker.id005.batch_cost = 5
//! ```
//!
//! Keys are applied top to bottom; `workers = N` creates `id001`..`idN`
//! and `worker.<id>.<field>` creates or edits one worker.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SplitMode;
use crate::schedule::{LrRegime, TrainConfig};
use crate::server::{AggregationCondition, ServerConfig, StopCondition};
use crate::strategy::StrategyKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct ScenarioError {
    /// 1-based; 0 for whole-scenario validation failures.
    pub line: usize,
    pub reason: String,
}

impl ScenarioError {
    fn at(line: usize, reason: impl Into<String>) -> Self {
        Self {
            line,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Gpu,
    Cpu,
}

impl Preset {
    pub fn batch_cost(self) -> f64 {
        match self {
            Preset::Gpu => 1.0,
            Preset::Cpu => 8.0,
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gpu" => Ok(Preset::Gpu),
            "cpu" => Ok(Preset::Cpu),
            other => Err(format!("unknown preset `{other}` (gpu|cpu)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    /// Simulated time per mini-batch.
    pub batch_cost: f64,
    pub uplink: f64,
    pub downlink: f64,
    pub join_time: f64,
    pub failure_time: Option<f64>,
    pub qod: f64,
}

impl WorkerProfile {
    pub fn new(worker_id: impl Into<String>, preset: Preset) -> Self {
        Self {
            worker_id: worker_id.into(),
            batch_cost: preset.batch_cost(),
            uplink: 0.0,
            downlink: 0.0,
            join_time: 0.0,
            failure_time: None,
            qod: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub uplink: f64,
    pub downlink: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n: usize,
    pub dims: usize,
    pub classes: usize,
    pub separation: f64,
    pub split: SplitMode,
    /// Held-out rows for the tester, drawn from the same clusters.
    pub test_n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            dims: 2,
            classes: 2,
            separation: 3.0,
            split: SplitMode::DisjointNoniid,
            test_n: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub job: String,
    pub profiles: Vec<WorkerProfile>,
    pub tester: Option<LinkProfile>,
    pub data: DataConfig,
    /// Per-worker training template; seeds are derived per worker.
    pub train: TrainConfig,
    pub server: ServerConfig,
    /// Trigger used by asyn2f; the baselines derive their own.
    pub aggregation: AggregationCondition,
    /// Simulated-time budget; the run is marked incomplete if it ends here.
    pub duration: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        let server = ServerConfig {
            server_id: "server".into(),
            model_name: "synth".into(),
            bucket: "synth".into(),
            aggregation: AggregationCondition::OnCount { n: 3 },
            stop: StopCondition {
                max_epochs: Some(60),
                ..StopCondition::default()
            },
            decay_steps: 60,
            ..ServerConfig::default()
        };
        Self {
            seed: 1,
            job: "synth".into(),
            profiles: (1..=5)
                .map(|i| WorkerProfile::new(format!("id{i:03}"), Preset::Gpu))
                .collect(),
            tester: Some(LinkProfile {
                uplink: 0.0,
                downlink: 0.0,
            }),
            data: DataConfig::default(),
            train: TrainConfig {
                decay_steps: 60,
                local_rounds_per_epoch: 5,
                ..TrainConfig::default()
            },
            server,
            aggregation: AggregationCondition::OnCount { n: 3 },
            duration: 50_000.0,
        }
    }
}

impl Scenario {
    pub fn trainer_count(&self) -> usize {
        self.profiles.len()
    }

    /// Brings derived settings in line: job naming, schedule horizon, and
    /// the strategy-specific aggregation trigger. Baselines override the
    /// trigger: FedAvg waits for every trainer, M-Step KAFL reacts to each
    /// received model.
    pub fn normalized(mut self) -> Self {
        self.server.bucket.clone_from(&self.job);
        self.server.model_name.clone_from(&self.job);
        self.server.lr_regime = self.train.lr_regime;
        self.server.lr_initial = self.train.lr_initial;
        if let Some(m) = self.server.stop.max_epochs {
            self.server.decay_steps = m;
            self.train.decay_steps = m;
        }
        let n = self.trainer_count();
        match self.server.strategy.kind {
            StrategyKind::Fedavg => {
                self.server.strategy.k_fedavg = n;
                self.server.aggregation = AggregationCondition::OnCount { n };
            }
            StrategyKind::MstepKafl => {
                self.server.aggregation = AggregationCondition::OnCount { n: 1 };
            }
            StrategyKind::Asyn2f => self.server.aggregation = self.aggregation,
        }
        self
    }

    /// The same scenario under another strategy and LR regime.
    pub fn with_variant(mut self, kind: StrategyKind, regime: LrRegime, seed: u64) -> Self {
        self.server.strategy.kind = kind;
        self.train.lr_regime = regime;
        self.seed = seed;
        self.normalized()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |reason: String| Err(ScenarioError::at(0, reason));
        if self.profiles.is_empty() {
            return bad("at least one trainer is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.profiles {
            if p.worker_id.is_empty()
                || p.worker_id.contains(['.', '/'])
                || p.worker_id == "server"
                || p.worker_id == "tester"
                || p.worker_id == "monitor"
            {
                return bad(format!("invalid worker id `{}`", p.worker_id));
            }
            if !seen.insert(&p.worker_id) {
                return bad(format!("duplicate worker id `{}`", p.worker_id));
            }
            if !(p.batch_cost > 0.0 && p.batch_cost.is_finite()) {
                return bad(format!("worker {}: batch_cost must be positive", p.worker_id));
            }
            let times = [p.uplink, p.downlink, p.join_time];
            if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return bad(format!("worker {}: latencies and join must be >= 0", p.worker_id));
            }
            if !(p.qod > 0.0 && p.qod <= 1.0) {
                return bad(format!("worker {}: qod must lie in (0, 1]", p.worker_id));
            }
        }
        if let Some(t) = &self.tester {
            if !(t.uplink >= 0.0 && t.downlink >= 0.0) {
                return bad("tester latencies must be >= 0".into());
            }
            if self.data.test_n == 0 {
                return bad("data.test_n must be positive when a tester is present".into());
            }
        }
        if !(self.duration > 0.0) {
            return bad("duration must be positive".into());
        }
        self.server
            .validate()
            .map_err(|e| ScenarioError::at(0, e.to_string()))
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario {
            profiles: Vec::new(),
            ..Scenario::default()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ScenarioError::at(line, format!("expected `key = value`, got `{content}`")))?;
            sc.apply(key.trim(), value.trim())
                .map_err(|reason| ScenarioError::at(line, reason))?;
        }
        let sc = sc.normalized();
        sc.validate()?;
        Ok(sc)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = num(value)?,
            "job" => {
                if value.is_empty() || value.contains(['/', '.']) {
                    return Err(format!("invalid job name `{value}`"));
                }
                self.job = value.into();
            }
            "duration" => self.duration = num(value)?,
            "data.n" => self.data.n = num(value)?,
            "data.dims" => self.data.dims = num(value)?,
            "data.classes" => self.data.classes = num(value)?,
            "data.separation" => self.data.separation = num(value)?,
            "data.split" => self.data.split = value.parse().map_err(|e: crate::Error| e.to_string())?,
            "data.test_n" => self.data.test_n = num(value)?,
            "train.batch_size" => self.train.batch_size = num(value)?,
            "train.local_rounds" => self.train.local_rounds_per_epoch = num(value)?,
            "train.lr" => self.train.lr_initial = num(value)?,
            "train.momentum" => self.train.momentum = num(value)?,
            "train.regime" => {
                self.train.lr_regime = value.parse().map_err(|e: crate::Error| e.to_string())?
            }
            "strategy" => {
                self.server.strategy.kind = value.parse().map_err(|e: crate::Error| e.to_string())?
            }
            "strategy.beta" => self.server.strategy.beta = num(value)?,
            "strategy.m" => self.server.strategy.m_buffer = num(value)?,
            "strategy.alpha" => self.server.strategy.alpha_kafl = num(value)?,
            "strategy.loss_epsilon" => self.server.strategy.loss_epsilon = num(value)?,
            "server.aggregation" => self.aggregation = aggregation(value)?,
            "server.max_epochs" => self.server.stop.max_epochs = opt(value)?,
            "server.max_duration" => self.server.stop.max_duration = opt(value)?,
            "server.target" => self.server.stop.target_performance = opt(value)?,
            "server.period" => self.server.period = num(value)?,
            "exchange.performance" => self.server.exchange_at.performance = num(value)?,
            "exchange.epoch" => self.server.exchange_at.epoch = num(value)?,
            "tester" => {
                self.tester = match value {
                    "true" | "yes" | "on" => Some(self.tester.unwrap_or(LinkProfile {
                        uplink: 0.0,
                        downlink: 0.0,
                    })),
                    "false" | "no" | "off" => None,
                    other => return Err(format!("expected true/false, got `{other}`")),
                }
            }
            "tester.uplink" | "tester.downlink" => {
                let t = self
                    .tester
                    .as_mut()
                    .ok_or("tester is disabled; set `tester = true` first")?;
                let v = num(value)?;
                if key.ends_with("uplink") {
                    t.uplink = v;
                } else {
                    t.downlink = v;
                }
            }
            "workers" => {
                let n: usize = num(value)?;
                for i in 1..=n {
                    let id = format!("id{i:03}");
                    if !self.profiles.iter().any(|p| p.worker_id == id) {
                        self.profiles.push(WorkerProfile::new(id, Preset::Gpu));
                    }
                }
            }
            "workers.preset" => {
                let preset: Preset = value.parse()?;
                for p in &mut self.profiles {
                    p.batch_cost = preset.batch_cost();
                }
            }
            _ => {
                let rest = key
                    .strip_prefix("worker.")
                    .ok_or_else(|| format!("unknown key `{key}`"))?;
                let (id, field) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| format!("expected `worker.<id>.<field>`, got `{key}`"))?;
                let p = match self.profiles.iter().position(|p| p.worker_id == id) {
                    Some(i) => &mut self.profiles[i],
                    None => {
                        self.profiles.push(WorkerProfile::new(id, Preset::Gpu));
                        self.profiles.last_mut().expect("just pushed")
                    }
                };
                match field {
                    "preset" => p.batch_cost = value.parse::<Preset>()?.batch_cost(),
                    "batch_cost" => p.batch_cost = num(value)?,
                    "uplink" => p.uplink = num(value)?,
                    "downlink" => p.downlink = num(value)?,
                    "join" => p.join_time = num(value)?,
                    "fail" => p.failure_time = opt(value)?,
                    "qod" => p.qod = num(value)?,
                    other => return Err(format!("unknown worker field `{other}`")),
                }
            }
        }
        Ok(())
    }

    /// Renders the scenario in the file format; `parse` reads it back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        let s = &self.server;
        kv("seed", self.seed.to_string());
        kv("job", self.job.clone());
        kv("duration", self.duration.to_string());
        kv("data.n", self.data.n.to_string());
        kv("data.dims", self.data.dims.to_string());
        kv("data.classes", self.data.classes.to_string());
        kv("data.separation", self.data.separation.to_string());
        kv("data.split", split_name(self.data.split).into());
        kv("data.test_n", self.data.test_n.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.local_rounds", self.train.local_rounds_per_epoch.to_string());
        kv("train.lr", self.train.lr_initial.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("train.regime", self.train.lr_regime.as_str().into());
        kv("strategy", s.strategy.kind.as_str().into());
        kv("strategy.beta", s.strategy.beta.to_string());
        kv("strategy.m", s.strategy.m_buffer.to_string());
        kv("strategy.alpha", s.strategy.alpha_kafl.to_string());
        kv("strategy.loss_epsilon", s.strategy.loss_epsilon.to_string());
        kv(
            "server.aggregation",
            match self.aggregation {
                AggregationCondition::OnCount { n } => format!("count:{n}"),
                AggregationCondition::Periodic { interval } => format!("periodic:{interval}"),
            },
        );
        kv("server.max_epochs", opt_text(s.stop.max_epochs));
        kv("server.max_duration", opt_text(s.stop.max_duration));
        kv("server.target", opt_text(s.stop.target_performance));
        kv("server.period", s.period.to_string());
        kv("exchange.performance", s.exchange_at.performance.to_string());
        kv("exchange.epoch", s.exchange_at.epoch.to_string());
        match &self.tester {
            Some(t) => {
                kv("tester", "true".into());
                kv("tester.uplink", t.uplink.to_string());
                kv("tester.downlink", t.downlink.to_string());
            }
            None => kv("tester", "false".into()),
        }
        for p in &self.profiles {
            let id = &p.worker_id;
            kv(&format!("worker.{id}.batch_cost"), p.batch_cost.to_string());
            kv(&format!("worker.{id}.uplink"), p.uplink.to_string());
            kv(&format!("worker.{id}.downlink"), p.downlink.to_string());
            kv(&format!("worker.{id}.join"), p.join_time.to_string());
            kv(&format!("worker.{id}.fail"), opt_text(p.failure_time));
            kv(&format!("worker.{id}.qod"), p.qod.to_string());
        }
        out
    }
}

fn split_name(mode: SplitMode) -> &'static str {
    match mode {
        SplitMode::OverlapIid => "overlap_iid",
        SplitMode::DisjointIid => "disjoint_iid",
        SplitMode::DisjointNoniid => "disjoint_noniid",
    }
}

fn num<T: FromStr>(value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` as a number"))
}

fn opt<T: FromStr>(value: &str) -> Result<Option<T>, String> {
    if value == "none" {
        Ok(None)
    } else {
        num(value).map(Some)
    }
}

fn opt_text<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

fn aggregation(value: &str) -> Result<AggregationCondition, String> {
    match value.split_once(':') {
        Some(("count", n)) => Ok(AggregationCondition::OnCount { n: num(n)? }),
        Some(("periodic", t)) => Ok(AggregationCondition::Periodic { interval: num(t)? }),
        _ => Err(format!("expected `count:<n>` or `periodic:<interval>`, got `{value}`")),
    }
}
