//! Model-combination math for the server and the workers.
//!
//! The server side weights each queued local model by
//! `Q·s / (L·(i − i_k))` (data quality × data size over loss × version
//! delay), normalizes, and takes the weighted sum. The worker side folds a
//! freshly released global model into the model it is still training,
//! weight by weight, depending on whether local and global movement agree
//! in direction. FedAvg and M-Step KAFL are provided as baselines behind
//! the same [`Strategy`] trait.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{check_finite, ParameterVector};

pub const DEFAULT_LOSS_EPSILON: f64 = 1e-8;
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModelSubmission {
    pub worker_id: String,
    pub weights: ParameterVector,
    pub loss: f64,
    pub qod: f64,
    pub data_size: u64,
    /// Latest global version the worker had adopted when it finished.
    pub global_version_used: u64,
    pub submit_time: f64,
    /// Arrival order at the server; breaks `submit_time` ties.
    pub arrival: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModelRecord {
    pub version: u64,
    pub weights: ParameterVector,
    pub avg_qod: f64,
    pub total_data_size: u64,
    pub avg_loss: f64,
    pub contributors: Vec<String>,
}

impl GlobalModelRecord {
    /// Version-0 record for the initial (or pre-trained) model.
    pub fn initial(weights: ParameterVector) -> Self {
        Self {
            version: 0,
            weights,
            avg_qod: 1.0,
            total_data_size: 1,
            avg_loss: 1.0,
            contributors: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Asyn2f,
    Fedavg,
    MstepKafl,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Asyn2f => "asyn2f",
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::MstepKafl => "mstep_kafl",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asyn2f" => Ok(StrategyKind::Asyn2f),
            "fedavg" => Ok(StrategyKind::Fedavg),
            "mstep_kafl" | "kafl" => Ok(StrategyKind::MstepKafl),
            other => Err(Error::param("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub beta: f64,
    pub k_fedavg: usize,
    pub m_buffer: usize,
    pub alpha_kafl: f64,
    pub loss_epsilon: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Asyn2f,
            beta: DEFAULT_BETA,
            k_fedavg: 1,
            m_buffer: 3,
            alpha_kafl: 0.5,
            loss_epsilon: DEFAULT_LOSS_EPSILON,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::param("beta", format!("{} not in (0, 1)", self.beta)));
        }
        if !(self.loss_epsilon > 0.0) {
            return Err(Error::param("loss_epsilon", "must be positive"));
        }
        if self.k_fedavg == 0 {
            return Err(Error::param("k_fedavg", "must be positive"));
        }
        if self.m_buffer == 0 {
            return Err(Error::param("m_buffer", "must be positive"));
        }
        if !(self.alpha_kafl > 0.0 && self.alpha_kafl < 1.0) {
            return Err(Error::param("alpha_kafl", format!("{} not in (0, 1)", self.alpha_kafl)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Strategy>> {
        self.validate()?;
        Ok(match self.kind {
            StrategyKind::Asyn2f => Box::new(Asyn2f {
                loss_epsilon: self.loss_epsilon,
            }),
            StrategyKind::Fedavg => Box::new(FedAvg { k: self.k_fedavg }),
            StrategyKind::MstepKafl => Box::new(MStepKafl {
                m: self.m_buffer,
                alpha: self.alpha_kafl,
                buffer: Vec::new(),
            }),
        })
    }
}

fn clamp_loss(loss: f64, eps: f64, what: &str) -> f64 {
    if loss < eps {
        tracing::warn!(loss, eps, what, "loss below epsilon; clamped");
        eps
    } else {
        loss
    }
}

/// Unnormalized contribution `Q·s / (L·(i − i_k))` of one submission to
/// global version `new_version`.
pub fn contribution_ratio(
    sub: &LocalModelSubmission,
    new_version: u64,
    loss_epsilon: f64,
) -> Result<f64> {
    if new_version <= sub.global_version_used {
        return Err(Error::StalenessInversion {
            new_version,
            used_version: sub.global_version_used,
        });
    }
    let delay = (new_version - sub.global_version_used) as f64;
    let loss = clamp_loss(sub.loss, loss_epsilon, "submission");
    Ok(sub.qod * sub.data_size as f64 / (loss * delay))
}

/// Scales positive ratios to sum to one.
pub fn normalize_ratios(ratios: &[f64]) -> Result<Vec<f64>> {
    if ratios.is_empty() {
        return Err(Error::Aggregation("no ratios to normalize".into()));
    }
    if let Some(bad) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::Aggregation(format!("ratio {bad} is not positive")));
    }
    let total: f64 = ratios.iter().sum();
    Ok(ratios.iter().map(|r| r / total).collect())
}

/// Latest submission per worker, by `(submit_time, arrival)`, in the order
/// the retained submissions appear in the queue.
pub fn latest_per_worker(queue: &[LocalModelSubmission]) -> Vec<&LocalModelSubmission> {
    let mut best: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, sub) in queue.iter().enumerate() {
        best.entry(sub.worker_id.as_str())
            .and_modify(|cur| {
                let c = &queue[*cur];
                if (sub.submit_time, sub.arrival) > (c.submit_time, c.arrival) {
                    *cur = idx;
                }
            })
            .or_insert(idx);
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| &queue[i]).collect()
}

/// One contributor's share of an aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub worker_id: String,
    pub global_version_used: u64,
    /// Unnormalized ratio (the data-size weight for FedAvg).
    pub ratio: f64,
    /// Normalized weight in the new global model.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub record: GlobalModelRecord,
    pub shares: Vec<Share>,
}

fn record_from(
    contributors: &[&LocalModelSubmission],
    version: u64,
    weights: ParameterVector,
) -> GlobalModelRecord {
    let n = contributors.len() as f64;
    GlobalModelRecord {
        version,
        weights,
        avg_qod: contributors.iter().map(|s| s.qod).sum::<f64>() / n,
        total_data_size: contributors.iter().map(|s| s.data_size).sum(),
        avg_loss: contributors.iter().map(|s| s.loss).sum::<f64>() / n,
        contributors: contributors.iter().map(|s| s.worker_id.clone()).collect(),
    }
}

fn check_lengths(subs: &[&LocalModelSubmission]) -> Result<()> {
    let len = subs[0].weights.len();
    for s in subs {
        s.weights.ensure_len(len)?;
    }
    Ok(())
}

/// Staleness- and quality-weighted aggregation of the queue into global
/// version `new_version`.
pub fn aggregate_asyn2f(
    queue: &[LocalModelSubmission],
    new_version: u64,
    loss_epsilon: f64,
) -> Result<Aggregation> {
    let subs = latest_per_worker(queue);
    if subs.is_empty() {
        return Err(Error::Aggregation("empty submission queue".into()));
    }
    check_lengths(&subs)?;
    let ratios = subs
        .iter()
        .map(|s| contribution_ratio(s, new_version, loss_epsilon))
        .collect::<Result<Vec<_>>>()?;
    let weights = normalize_ratios(&ratios)?;
    let global = ParameterVector::weighted_sum(
        weights.iter().zip(&subs).map(|(w, s)| (*w, &s.weights)),
    )?;
    let shares = subs
        .iter()
        .zip(ratios.iter().zip(&weights))
        .map(|(s, (&ratio, &weight))| Share {
            worker_id: s.worker_id.clone(),
            global_version_used: s.global_version_used,
            ratio,
            weight,
        })
        .collect();
    Ok(Aggregation {
        record: record_from(&subs, new_version, global),
        shares,
    })
}

/// Worker-side mixing weight of the local model:
/// `β·Qs/(Qs + Q̄S) + (1−β)·L̄/(L + L̄)`.
pub fn local_mix_coefficient(
    qod: f64,
    data_size: u64,
    current_loss: f64,
    global: &GlobalModelRecord,
    beta: f64,
    loss_epsilon: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::param("beta", format!("{beta} not in [0, 1]")));
    }
    let local_mass = qod * data_size as f64;
    let global_mass = global.avg_qod * global.total_data_size as f64;
    if !(local_mass > 0.0 && global_mass > 0.0) {
        return Err(Error::param("qod/data_size", "data masses must be positive"));
    }
    let loss = clamp_loss(current_loss, loss_epsilon, "local");
    let avg_loss = clamp_loss(global.avg_loss, loss_epsilon, "global average");
    Ok(beta * local_mass / (local_mass + global_mass) + (1.0 - beta) * avg_loss / (loss + avg_loss))
}

/// Folds `global` into the local model at batch `j`. Where the last local
/// step and the global offset point the same way the global value is taken
/// outright; elsewhere the two are mixed with weight `alpha` on the local.
pub fn merge_local(
    global: &ParameterVector,
    local_j: &ParameterVector,
    local_jm1: &ParameterVector,
    alpha: f64,
) -> Result<ParameterVector> {
    global.ensure_same_len(local_j)?;
    global.ensure_same_len(local_jm1)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} not in [0, 1]")));
    }
    let merged: Vec<f64> = global
        .as_slice()
        .iter()
        .zip(local_j.as_slice())
        .zip(local_jm1.as_slice())
        .map(|((&g, &cur), &prev)| {
            let e_local = cur - prev;
            let e_global = g - cur;
            if e_local * e_global > 0.0 {
                g
            } else {
                // (1−α)·g + α·cur, written to be exact when g == cur
                g + alpha * (cur - g)
            }
        })
        .collect();
    check_finite(&merged)?;
    ParameterVector::new(merged)
}

/// Data-size weighted mean over exactly `k` workers.
pub fn aggregate_fedavg(subs: &[&LocalModelSubmission], k: usize) -> Result<ParameterVector> {
    if subs.len() != k {
        return Err(Error::RoundIncomplete {
            have: subs.len(),
            need: k,
        });
    }
    check_lengths(subs)?;
    let total: f64 = subs.iter().map(|s| s.data_size as f64).sum();
    ParameterVector::weighted_sum(subs.iter().map(|s| (s.data_size as f64 / total, &s.weights)))
}

/// One receipt of M-Step KAFL: the incoming model becomes the interim
/// global; once the buffer holds `m` models their mean is merged in with
/// ratio `alpha` and the buffer is cleared.
pub fn aggregate_mstep_kafl(
    incoming: &ParameterVector,
    mut buffer: Vec<ParameterVector>,
    current_global: &ParameterVector,
    m: usize,
    alpha: f64,
) -> Result<(ParameterVector, Vec<ParameterVector>)> {
    if m == 0 {
        return Err(Error::param("m", "buffer size must be positive"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("{alpha} not in (0, 1)")));
    }
    current_global.ensure_same_len(incoming)?;
    for b in &buffer {
        b.ensure_same_len(incoming)?;
    }
    let interim = incoming.clone();
    buffer.push(incoming.clone());
    if buffer.len() < m {
        return Ok((interim, buffer));
    }
    let mean = ParameterVector::mean(&buffer)?;
    let merged = interim.lerp(&mean, alpha)?;
    buffer.clear();
    Ok((merged, buffer))
}

/// Server-side aggregation rule.
pub trait Strategy: Send {
    fn kind(&self) -> StrategyKind;

    /// Aggregates a drained queue into global version `new_version`.
    /// On error the caller keeps the queue.
    fn aggregate(
        &mut self,
        queue: &[LocalModelSubmission],
        new_version: u64,
        current: &GlobalModelRecord,
    ) -> Result<Aggregation>;
}

#[derive(Debug, Clone)]
pub struct Asyn2f {
    pub loss_epsilon: f64,
}

impl Strategy for Asyn2f {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Asyn2f
    }

    fn aggregate(
        &mut self,
        queue: &[LocalModelSubmission],
        new_version: u64,
        _current: &GlobalModelRecord,
    ) -> Result<Aggregation> {
        aggregate_asyn2f(queue, new_version, self.loss_epsilon)
    }
}

#[derive(Debug, Clone)]
pub struct FedAvg {
    pub k: usize,
}

impl Strategy for FedAvg {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Fedavg
    }

    fn aggregate(
        &mut self,
        queue: &[LocalModelSubmission],
        new_version: u64,
        _current: &GlobalModelRecord,
    ) -> Result<Aggregation> {
        let subs = latest_per_worker(queue);
        let weights = aggregate_fedavg(&subs, self.k)?;
        let total: f64 = subs.iter().map(|s| s.data_size as f64).sum();
        let shares = subs
            .iter()
            .map(|s| Share {
                worker_id: s.worker_id.clone(),
                global_version_used: s.global_version_used,
                ratio: s.data_size as f64,
                weight: s.data_size as f64 / total,
            })
            .collect();
        Ok(Aggregation {
            record: record_from(&subs, new_version, weights),
            shares,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MStepKafl {
    pub m: usize,
    pub alpha: f64,
    pub buffer: Vec<ParameterVector>,
}

impl Strategy for MStepKafl {
    fn kind(&self) -> StrategyKind {
        StrategyKind::MstepKafl
    }

    /// Feeds every queued submission through the buffer in arrival order.
    fn aggregate(
        &mut self,
        queue: &[LocalModelSubmission],
        new_version: u64,
        current: &GlobalModelRecord,
    ) -> Result<Aggregation> {
        if queue.is_empty() {
            return Err(Error::Aggregation("empty submission queue".into()));
        }
        let mut ordered: Vec<&LocalModelSubmission> = queue.iter().collect();
        ordered.sort_by_key(|s| s.arrival);
        let mut global = current.weights.clone();
        let mut buffer = self.buffer.clone();
        for sub in &ordered {
            (global, buffer) =
                aggregate_mstep_kafl(&sub.weights, buffer, &global, self.m, self.alpha)?;
        }
        self.buffer = buffer;
        Ok(Aggregation {
            record: record_from(&ordered, new_version, global),
            shares: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    fn sub(id: &str, w: &[f64], q: f64, s: u64, l: f64, ik: u64, t: f64) -> LocalModelSubmission {
        LocalModelSubmission {
            worker_id: id.into(),
            weights: pv(w),
            loss: l,
            qod: q,
            data_size: s,
            global_version_used: ik,
            submit_time: t,
            arrival: 0,
        }
    }

    fn record(q: f64, s: u64, l: f64) -> GlobalModelRecord {
        GlobalModelRecord {
            version: 1,
            weights: pv(&[0.0]),
            avg_qod: q,
            total_data_size: s,
            avg_loss: l,
            contributors: vec![],
        }
    }

    #[test]
    fn staleness_inversion_is_an_error() {
        let s = sub("a", &[1.0], 1.0, 10, 1.0, 3, 0.0);
        assert!(matches!(
            contribution_ratio(&s, 3, 1e-8),
            Err(Error::StalenessInversion { .. })
        ));
    }

    #[test]
    fn zero_loss_is_clamped() {
        let s = sub("a", &[1.0], 1.0, 10, 0.0, 0, 0.0);
        assert_eq!(contribution_ratio(&s, 1, 1e-8).unwrap(), 10.0 / 1e-8);
    }

    #[test]
    fn normalize_rejects_empty_and_nonpositive() {
        assert!(normalize_ratios(&[]).is_err());
        assert!(normalize_ratios(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn empty_queue_is_rejected() {
        assert!(matches!(aggregate_asyn2f(&[], 1, 1e-8), Err(Error::Aggregation(_))));
    }

    #[test]
    fn mixed_lengths_are_rejected() {
        let q = vec![
            sub("a", &[1.0, 2.0], 1.0, 10, 1.0, 0, 0.0),
            sub("b", &[1.0], 1.0, 10, 1.0, 0, 0.0),
        ];
        assert!(matches!(aggregate_asyn2f(&q, 1, 1e-8), Err(Error::Shape { .. })));
    }

    #[test]
    fn dedup_tie_breaks_on_arrival() {
        let mut a1 = sub("a", &[1.0], 1.0, 10, 1.0, 0, 5.0);
        let mut a2 = sub("a", &[2.0], 1.0, 10, 1.0, 0, 5.0);
        a1.arrival = 1;
        a2.arrival = 2;
        let q = vec![a2.clone(), a1];
        let kept = latest_per_worker(&q);
        assert_eq!(kept, vec![&a2]);
    }

    #[test]
    fn fedavg_round_incomplete() {
        let a = sub("a", &[1.0], 1.0, 10, 1.0, 0, 0.0);
        assert_eq!(
            aggregate_fedavg(&[&a], 2).unwrap_err(),
            Error::RoundIncomplete { have: 1, need: 2 }
        );
    }

    #[test]
    fn mix_coefficient_symmetric_case() {
        let g = record(0.5, 200, 2.0);
        let a = local_mix_coefficient(1.0, 100, 2.0, &g, 0.5, 1e-8).unwrap();
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mix_coefficient_vanishes_for_huge_local_loss() {
        let g = record(1.0, 100, 1.0);
        let a = local_mix_coefficient(1.0, 100, 1e12, &g, 0.0, 1e-8).unwrap();
        assert!(a < 1e-11);
    }

    #[test]
    fn merge_length_mismatch() {
        assert!(merge_local(&pv(&[1.0]), &pv(&[1.0, 2.0]), &pv(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn kafl_buffer_resets_after_flush() {
        let g = pv(&[0.0]);
        let (_, b) = aggregate_mstep_kafl(&pv(&[1.0]), vec![pv(&[3.0])], &g, 2, 0.5).unwrap();
        assert!(b.is_empty());
        let (_, b) = aggregate_mstep_kafl(&pv(&[2.0]), b, &g, 2, 0.5).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn kafl_strategy_carries_buffer_across_aggregations() {
        let mut s = StrategyConfig {
            kind: StrategyKind::MstepKafl,
            m_buffer: 2,
            ..StrategyConfig::default()
        }
        .build()
        .unwrap();
        let init = GlobalModelRecord::initial(pv(&[0.0]));
        let first = s.aggregate(&[sub("a", &[2.0], 1.0, 1, 1.0, 0, 0.0)], 1, &init).unwrap();
        assert_eq!(first.record.weights, pv(&[2.0]));
        let second = s
            .aggregate(&[sub("b", &[4.0], 1.0, 1, 1.0, 0, 1.0)], 2, &first.record)
            .unwrap();
        // 0.5·4 + 0.5·mean(2, 4)
        assert_eq!(second.record.weights, pv(&[3.5]));
    }

    #[test]
    fn config_validation() {
        let mut c = StrategyConfig::default();
        assert!(c.validate().is_ok());
        c.beta = 1.0;
        assert!(c.validate().is_err());
        c.beta = 0.5;
        c.loss_epsilon = 0.0;
        assert!(c.validate().is_err());
    }
}
