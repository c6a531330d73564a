//! The worker training pipeline: mini-batch SGD with between-batch
//! adoption of newly released global models, exchange-threshold gating and
//! local-model upload.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{evaluate, sgd_train_batch, Evaluation, ModelSpec};
use crate::params::ParameterVector;
use crate::schedule::{cosine_decay_lr, LrRegime, TrainConfig};
use crate::storage::{encode_weights, ObjectKey, ObjectStore};
use crate::strategy::{local_mix_coefficient, merge_local, GlobalModelRecord, StrategyKind};
use crate::wire::{
    sim_timestamp, DataDescription, ExchangeAt, MessageType, Role, SystemInfo, WorkerHeaders,
    WorkerInitContent, WorkerInitMsg, WorkerNotifyContent, WorkerNotifyMsg,
};

/// How a worker takes in a new global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Merge weight by weight at the next batch boundary.
    MidEpoch,
    /// Adopt wholesale at the next epoch start; never wait.
    AtEpochStart,
    /// Adopt wholesale, and after submitting wait for the next global.
    Synchronous,
}

impl From<StrategyKind> for MergePolicy {
    fn from(kind: StrategyKind) -> Self {
        match kind {
            StrategyKind::Asyn2f => MergePolicy::MidEpoch,
            StrategyKind::Fedavg => MergePolicy::Synchronous,
            StrategyKind::MstepKafl => MergePolicy::AtEpochStart,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub beta: f64,
    pub loss_epsilon: f64,
    pub merge_policy: MergePolicy,
    pub system_info: SystemInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingGlobal {
    pub record: GlobalModelRecord,
    /// Rate announced alongside this version, if any.
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdoptMode {
    /// Taken as-is (epoch boundary or non-merging policy).
    Replace,
    /// Folded in weight by weight with local coefficient `alpha`.
    Merge { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adoption {
    pub version: u64,
    pub previous_version: u64,
    pub mode: AdoptMode,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: u64,
    pub batch: usize,
    /// Global version the weights were derived from when the batch ran.
    pub global_version: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    /// 1-based index of the finished epoch.
    pub epoch: u64,
    pub loss: f64,
    pub performance: f64,
    pub global_version_used: u64,
    pub notify: Option<WorkerNotifyMsg>,
    pub uploaded_bytes: u64,
    /// Set when the upload failed twice; training carries on.
    pub upload_error: Option<Error>,
}

/// Mutable training state of one worker.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub dataset: Dataset,
    pub current_weights: ParameterVector,
    /// Weights as they were before the last batch ran.
    pub prev_batch_weights: ParameterVector,
    pub velocity: ParameterVector,
    /// Version of the last adopted global model.
    pub i_k: u64,
    /// Completed epochs.
    pub epoch_count: u64,
    /// Batches completed in the current epoch.
    pub batch_index: usize,
    pub pending_global: Option<PendingGlobal>,
    pub exchange_unlocked: bool,
    pub adopted_lr: Option<f64>,
    epoch_losses: Vec<f64>,
    last_epoch_loss: Option<f64>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Worker {
    pub config: WorkerConfig,
    pub state: WorkerState,
    pub bucket: String,
    pub exchange_at: ExchangeAt,
    pub halted: bool,
    /// A synchronous worker submitted and is waiting for a new global.
    pub awaiting_global: bool,
}

impl Worker {
    pub fn new(config: WorkerConfig, dataset: Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::param("dataset", "worker dataset must be nonempty"));
        }
        let mut train = config.train.clone();
        train.batch_size = train.batch_size.min(dataset.len());
        train.validate(dataset.len())?;
        let len = config.model.param_len();
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let order = epoch_order(dataset.len(), train.local_rounds_per_epoch, &mut rng);
        let config = WorkerConfig { train, ..config };
        Ok(Self {
            state: WorkerState {
                dataset,
                current_weights: ParameterVector::zeros(len),
                prev_batch_weights: ParameterVector::zeros(len),
                velocity: ParameterVector::zeros(len),
                i_k: 0,
                epoch_count: 0,
                batch_index: 0,
                pending_global: None,
                exchange_unlocked: false,
                adopted_lr: None,
                epoch_losses: Vec::new(),
                last_epoch_loss: None,
                order,
                rng,
            },
            config,
            bucket: String::new(),
            exchange_at: ExchangeAt {
                performance: 1.0,
                epoch: 1,
            },
            halted: false,
            awaiting_global: false,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.worker_id
    }

    pub fn batches_per_epoch(&self) -> usize {
        let per_pass = self.state.dataset.len().div_ceil(self.config.train.batch_size);
        per_pass * self.config.train.local_rounds_per_epoch
    }

    pub fn init_message(&self, session_id: &str, now: f64) -> WorkerInitMsg {
        WorkerInitMsg {
            headers: WorkerHeaders {
                message_type: MessageType::WorkerInit,
                worker_id: self.config.worker_id.clone(),
                session_id: session_id.to_string(),
                timestamp: sim_timestamp(now),
                extra: Default::default(),
            },
            content: WorkerInitContent {
                role: Role::Trainer,
                system_info: self.config.system_info.clone(),
                data_description: DataDescription {
                    size: self.state.dataset.len() as u64,
                    qod: self.state.dataset.qod(),
                },
                extra: Default::default(),
            },
            extra: Default::default(),
        }
    }

    /// Buffers a downloaded global until the next batch boundary. Anything
    /// not newer than both the adopted and the pending version is ignored.
    pub fn receive_global(&mut self, record: GlobalModelRecord, learning_rate: Option<f64>) -> bool {
        let newest_known = self
            .state
            .pending_global
            .as_ref()
            .map_or(self.state.i_k, |p| p.record.version.max(self.state.i_k));
        let fresh = record.version > newest_known
            || (record.version == 0 && self.state.epoch_count == 0 && self.state.batch_index == 0);
        if !fresh {
            tracing::debug!(worker = %self.id(), version = record.version, "stale global ignored");
            return false;
        }
        self.state.pending_global = Some(PendingGlobal {
            record,
            learning_rate,
        });
        true
    }

    /// Mean batch loss of the current epoch so far, else the last epoch's.
    pub fn running_loss(&self) -> Option<f64> {
        let l = &self.state.epoch_losses;
        if l.is_empty() {
            self.state.last_epoch_loss
        } else {
            Some(l.iter().sum::<f64>() / l.len() as f64)
        }
    }

    /// Folds a global model into the in-training model. At an epoch
    /// boundary, or under a non-merging policy, the global is taken as-is.
    pub fn apply_global_merge(
        &mut self,
        global: &GlobalModelRecord,
        learning_rate: Option<f64>,
    ) -> Result<Option<Adoption>> {
        let st = &self.state;
        let first_adoption = st.epoch_count == 0 && st.batch_index == 0 && global.version == 0;
        if global.version <= st.i_k && !first_adoption {
            tracing::debug!(worker = %self.id(), version = global.version, "stale global ignored");
            return Ok(None);
        }
        global.weights.ensure_same_len(&st.current_weights)?;
        let merge = self.config.merge_policy == MergePolicy::MidEpoch && st.batch_index > 0;
        let mode = if merge {
            let loss = self
                .running_loss()
                .expect("a batch has completed this epoch");
            let alpha = local_mix_coefficient(
                st.dataset.qod(),
                st.dataset.len() as u64,
                loss,
                global,
                self.config.beta,
                self.config.loss_epsilon,
            )?;
            self.state.current_weights = merge_local(
                &global.weights,
                &st.current_weights,
                &st.prev_batch_weights,
                alpha,
            )?;
            AdoptMode::Merge { alpha }
        } else {
            self.state.current_weights = global.weights.clone();
            AdoptMode::Replace
        };
        let previous_version = self.state.i_k;
        self.state.i_k = global.version;
        self.state.adopted_lr = learning_rate;
        self.state.pending_global = None;
        self.awaiting_global = false;
        Ok(Some(Adoption {
            version: global.version,
            previous_version,
            mode,
            learning_rate,
        }))
    }

    /// Whether a pending global may be taken in right now.
    pub fn can_adopt_now(&self) -> bool {
        self.config.merge_policy == MergePolicy::MidEpoch || self.state.batch_index == 0
    }

    /// Applies the pending global, if any and if the policy allows it here.
    pub fn at_batch_boundary(&mut self) -> Result<Option<Adoption>> {
        if !self.can_adopt_now() {
            return Ok(None);
        }
        match self.state.pending_global.take() {
            Some(p) => self.apply_global_merge(&p.record, p.learning_rate),
            None => Ok(None),
        }
    }

    pub fn select_lr(&self) -> f64 {
        select_lr(
            self.config.train.lr_regime,
            self.config.train.lr_initial,
            self.config.train.decay_steps,
            self.state.adopted_lr,
            self.state.epoch_count,
        )
    }

    /// Runs the next mini-batch of the current epoch.
    pub fn train_next_batch(&mut self) -> Result<BatchRecord> {
        let bs = self.config.train.batch_size;
        let per_pass = self.state.dataset.len().div_ceil(bs);
        let j = self.state.batch_index;
        let pass = j / per_pass;
        let within = j % per_pass;
        let n = self.state.dataset.len();
        let start = pass * n + within * bs;
        let end = (start + bs).min((pass + 1) * n);
        let batch = self.state.dataset.select(&self.state.order[start..end]);
        let lr = self.select_lr();
        let step = sgd_train_batch(
            &self.config.model,
            &self.state.current_weights,
            &batch,
            lr,
            self.config.train.momentum,
            &self.state.velocity,
        )?;
        let st = &mut self.state;
        st.prev_batch_weights = std::mem::replace(&mut st.current_weights, step.params);
        st.velocity = step.velocity;
        st.epoch_losses.push(step.loss);
        st.batch_index += 1;
        Ok(BatchRecord {
            epoch: st.epoch_count + 1,
            batch: j,
            global_version: st.i_k,
            lr,
            loss: step.loss,
        })
    }

    pub fn epoch_complete(&self) -> bool {
        self.state.batch_index >= self.batches_per_epoch()
    }

    pub fn evaluate_local(&self) -> Result<Evaluation> {
        evaluate(&self.config.model, &self.state.current_weights, &self.state.dataset)
    }

    /// Latches once the epoch or performance threshold is reached.
    pub fn check_exchange_threshold(&mut self, performance: f64) -> bool {
        if !self.state.exchange_unlocked {
            self.state.exchange_unlocked = self.state.epoch_count >= self.exchange_at.epoch
                || performance >= self.exchange_at.performance;
        }
        self.state.exchange_unlocked
    }

    pub fn local_path(&self, epoch: u64) -> String {
        format!("{}/epoch_{epoch}.pkl", self.config.worker_id)
    }

    /// Closes the epoch: computes its loss and local performance, and when
    /// the exchange threshold allows, uploads the model and builds the
    /// notification.
    pub fn finish_epoch(
        &mut self,
        session_id: &str,
        now: f64,
        store: &mut dyn ObjectStore,
    ) -> Result<EpochOutcome> {
        let losses = std::mem::take(&mut self.state.epoch_losses);
        let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        self.state.last_epoch_loss = Some(loss);
        self.state.epoch_count += 1;
        self.state.batch_index = 0;
        self.state.order = epoch_order(
            self.state.dataset.len(),
            self.config.train.local_rounds_per_epoch,
            &mut self.state.rng,
        );
        let performance = self.evaluate_local()?.accuracy;
        let epoch = self.state.epoch_count;
        let mut out = EpochOutcome {
            epoch,
            loss,
            performance,
            global_version_used: self.state.i_k,
            notify: None,
            uploaded_bytes: 0,
            upload_error: None,
        };
        if !self.check_exchange_threshold(performance) {
            return Ok(out);
        }
        let key = ObjectKey::new(&self.bucket, self.local_path(epoch))?;
        let bytes = encode_weights(&self.state.current_weights);
        let upload = store.put(&key, &bytes).or_else(|e| {
            tracing::warn!(worker = %self.id(), error = %e, "upload failed; retrying once");
            store.put(&key, &bytes)
        });
        if let Err(e) = upload {
            tracing::error!(worker = %self.id(), error = %e, "upload failed twice");
            out.upload_error = Some(e);
            return Ok(out);
        }
        out.uploaded_bytes = bytes.len() as u64;
        out.notify = Some(WorkerNotifyMsg {
            headers: WorkerHeaders {
                message_type: MessageType::WorkerNotify,
                worker_id: self.config.worker_id.clone(),
                session_id: session_id.to_string(),
                timestamp: sim_timestamp(now),
                extra: Default::default(),
            },
            content: WorkerNotifyContent {
                storage_path: format!("{}/{}", self.bucket, self.config.worker_id),
                file_name: format!("epoch_{epoch}.pkl"),
                global_version_used: self.state.i_k,
                performance,
                loss,
                extra: Default::default(),
            },
            extra: Default::default(),
        });
        if self.config.merge_policy == MergePolicy::Synchronous {
            self.awaiting_global = true;
        }
        Ok(out)
    }

    /// Runs one whole epoch outside the simulator. `feed` is polled at every
    /// batch boundary (including the epoch start) for a newly downloaded
    /// global model and its announced rate.
    pub fn training_epoch<F>(
        &mut self,
        session_id: &str,
        now: f64,
        store: &mut dyn ObjectStore,
        mut feed: F,
    ) -> Result<(EpochOutcome, Vec<Adoption>)>
    where
        F: FnMut(usize) -> Option<(GlobalModelRecord, Option<f64>)>,
    {
        if self.state.dataset.is_empty() {
            return Err(Error::param("dataset", "empty"));
        }
        let mut adoptions = Vec::new();
        while !self.epoch_complete() {
            if let Some((g, lr)) = feed(self.state.batch_index) {
                self.receive_global(g, lr);
            }
            adoptions.extend(self.at_batch_boundary()?);
            self.train_next_batch()?;
        }
        let out = self.finish_epoch(session_id, now, store)?;
        Ok((out, adoptions))
    }
}

fn epoch_order(n: usize, passes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order = Vec::with_capacity(n * passes);
    for _ in 0..passes {
        let mut pass: Vec<usize> = (0..n).collect();
        pass.shuffle(rng);
        order.extend(pass);
    }
    order
}

/// Learning rate for the next batch: constant, the rate announced with
/// the adopted global version (`lr_initial` until one arrives), or a
/// cosine decay over the worker's own epochs.
pub fn select_lr(
    regime: LrRegime,
    lr_initial: f64,
    decay_steps: u64,
    announced: Option<f64>,
    epoch_count: u64,
) -> f64 {
    match regime {
        LrRegime::Fixed => lr_initial,
        LrRegime::SyncDecay => announced.unwrap_or(lr_initial),
        LrRegime::AsyncDecay => cosine_decay_lr(epoch_count, decay_steps, lr_initial),
    }
}

/// A non-training worker that scores each global version on held-out data.
#[derive(Debug, Clone)]
pub struct Tester {
    pub id: String,
    pub model: ModelSpec,
    pub data: Dataset,
    pub system_info: SystemInfo,
    pub last_version: Option<u64>,
}

impl Tester {
    pub fn init_message(&self, session_id: &str, now: f64) -> WorkerInitMsg {
        WorkerInitMsg {
            headers: WorkerHeaders {
                message_type: MessageType::WorkerInit,
                worker_id: self.id.clone(),
                session_id: session_id.to_string(),
                timestamp: sim_timestamp(now),
                extra: Default::default(),
            },
            content: WorkerInitContent {
                role: Role::Tester,
                system_info: self.system_info.clone(),
                data_description: DataDescription {
                    size: self.data.len() as u64,
                    qod: self.data.qod(),
                },
                extra: Default::default(),
            },
            extra: Default::default(),
        }
    }

    /// Scores `weights` as global version `version`, once per version.
    pub fn evaluate(&mut self, version: u64, weights: &ParameterVector) -> Result<Option<Evaluation>> {
        if self.last_version.is_some_and(|v| v >= version) {
            return Ok(None);
        }
        self.last_version = Some(version);
        evaluate(&self.model, weights, &self.data).map(Some)
    }
}
