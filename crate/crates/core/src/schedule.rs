//! Learning-rate schedules and the per-worker training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a worker picks its learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRegime {
    /// Constant `lr_initial`.
    Fixed,
    /// Cosine decay over global versions, announced by the server.
    SyncDecay,
    /// Cosine decay over the worker's own epoch count.
    AsyncDecay,
}

impl LrRegime {
    pub fn as_str(&self) -> &'static str {
        match self {
            LrRegime::Fixed => "fixed",
            LrRegime::SyncDecay => "sync",
            LrRegime::AsyncDecay => "async",
        }
    }
}

impl std::str::FromStr for LrRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(LrRegime::Fixed),
            "sync" | "sync_decay" => Ok(LrRegime::SyncDecay),
            "async" | "async_decay" => Ok(LrRegime::AsyncDecay),
            other => Err(Error::param("lr_regime", format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decayed {
    pub lr: f64,
    /// `step` exceeded `total_steps` and was clamped to the final value.
    pub clamped: bool,
}

/// `0.5 · lr_initial · (1 + cos(π · step / total_steps))`, with steps past
/// the end clamped to the final value (0).
pub fn cosine_decay(step: u64, total_steps: u64, lr_initial: f64) -> Decayed {
    let total = total_steps.max(1);
    let clamped = step > total;
    let s = step.min(total) as f64;
    let lr = 0.5 * lr_initial * (1.0 + (std::f64::consts::PI * s / total as f64).cos());
    Decayed {
        lr: lr.max(0.0),
        clamped,
    }
}

/// [`cosine_decay`] that logs a warning when the step is clamped.
pub fn cosine_decay_lr(step: u64, total_steps: u64, lr_initial: f64) -> f64 {
    let d = cosine_decay(step, total_steps, lr_initial);
    if d.clamped {
        tracing::warn!(step, total_steps, "cosine decay step past schedule end; clamped");
    }
    d.lr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Full passes over the local data that make up one epoch.
    pub local_rounds_per_epoch: usize,
    pub lr_regime: LrRegime,
    pub lr_initial: f64,
    pub momentum: f64,
    /// Horizon of both decayed schedules: max global versions for sync,
    /// max local epochs for async.
    pub decay_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            local_rounds_per_epoch: 1,
            lr_regime: LrRegime::SyncDecay,
            lr_initial: 0.1,
            momentum: 0.9,
            decay_steps: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::param(
                "batch_size",
                format!("{} not in 1..={dataset_len}", self.batch_size),
            ));
        }
        if self.local_rounds_per_epoch == 0 {
            return Err(Error::param("local_rounds_per_epoch", "must be positive"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::param("lr_initial", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        if self.decay_steps == 0 {
            return Err(Error::param("decay_steps", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_decay_lr(0, 10, 0.1), 0.1);
        assert!(cosine_decay_lr(10, 10, 0.1).abs() < 1e-18);
        assert!((cosine_decay_lr(5, 10, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn past_end_is_clamped() {
        let d = cosine_decay(12, 10, 0.1);
        assert!(d.clamped);
        assert_eq!(d.lr, cosine_decay(10, 10, 0.1).lr);
        assert!(!cosine_decay(10, 10, 0.1).clamped);
    }

    #[test]
    fn nonincreasing_and_bounded() {
        let mut prev = f64::INFINITY;
        for s in 0..=200 {
            let lr = cosine_decay_lr(s, 200, 0.1);
            assert!(lr <= prev && (0.0..=0.1).contains(&lr));
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(100).is_ok());
        assert!(cfg.validate(10).is_err());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate(100).is_err());
    }
}
