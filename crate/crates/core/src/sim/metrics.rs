//! Tables derived from a run's event log: the global-model curve, per-worker
//! epochs, and communication volume. Each renders as CSV.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EventKind, SimEvent, Traffic};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRow {
    pub version: u64,
    pub aggregated_at: f64,
    pub contributors: usize,
    pub avg_loss: f64,
    pub learning_rate: Option<f64>,
    pub tested_at: Option<f64>,
    pub accuracy: Option<f64>,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub worker: String,
    pub epoch: u64,
    pub start: f64,
    pub end: f64,
    pub duration: f64,
    pub loss: f64,
    pub performance: f64,
    pub version_used: u64,
    pub submitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub participant: String,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub messages_up: u64,
    pub messages_down: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub global: Vec<GlobalRow>,
    pub epochs: Vec<EpochRow>,
    pub comm: Vec<CommRow>,
}

impl Metrics {
    pub(crate) fn from_run(
        log: &[SimEvent],
        tested: &BTreeMap<u64, (f64, f64, f64)>,
        traffic: &BTreeMap<String, Traffic>,
    ) -> Self {
        let mut global = Vec::new();
        let mut epochs = Vec::new();
        for ev in log {
            match &ev.kind {
                EventKind::Aggregation {
                    version,
                    shares,
                    avg_loss,
                    learning_rate,
                    ..
                } => {
                    let t = tested.get(version);
                    global.push(GlobalRow {
                        version: *version,
                        aggregated_at: ev.time,
                        contributors: shares.len(),
                        avg_loss: *avg_loss,
                        learning_rate: *learning_rate,
                        tested_at: t.map(|t| t.0),
                        accuracy: t.map(|t| t.1),
                        test_loss: t.map(|t| t.2),
                    });
                }
                EventKind::EpochDone {
                    worker,
                    epoch,
                    started,
                    loss,
                    performance,
                    version_used,
                    submitted,
                } => epochs.push(EpochRow {
                    worker: worker.clone(),
                    epoch: *epoch,
                    start: *started,
                    end: ev.time,
                    duration: ev.time - started,
                    loss: *loss,
                    performance: *performance,
                    version_used: *version_used,
                    submitted: *submitted,
                }),
                _ => {}
            }
        }
        let comm = traffic
            .iter()
            .map(|(who, t)| CommRow {
                participant: who.clone(),
                bytes_up: t.bytes_up,
                bytes_down: t.bytes_down,
                messages_up: t.messages_up,
                messages_down: t.messages_down,
            })
            .collect();
        Self {
            global,
            epochs,
            comm,
        }
    }

    /// Tester curve as (version, tested_at, accuracy), by version.
    pub fn tester_curve(&self) -> Vec<(u64, f64, f64)> {
        self.global
            .iter()
            .filter_map(|r| Some((r.version, r.tested_at?, r.accuracy?)))
            .collect()
    }

    /// Accuracy of the newest tested version.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.tester_curve().last().map(|c| c.2)
    }

    /// Earliest simulated time at which a tested version reached `target`.
    pub fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        self.tester_curve()
            .into_iter()
            .filter(|c| c.2 >= target)
            .map(|c| c.1)
            .min_by(f64::total_cmp)
    }

    pub fn global_csv(&self) -> Result<String> {
        to_csv(&self.global)
    }

    pub fn epochs_csv(&self) -> Result<String> {
        to_csv(&self.epochs)
    }

    pub fn comm_csv(&self) -> Result<String> {
        to_csv(&self.comm)
    }

    /// Writes `global.csv`, `epochs.csv` and `comm.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("global.csv"), self.global_csv()?)?;
        std::fs::write(dir.join("epochs.csv"), self.epochs_csv()?)?;
        std::fs::write(dir.join("comm.csv"), self.comm_csv()?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            global: from_csv(&dir.join("global.csv"))?,
            epochs: from_csv(&dir.join("epochs.csv"))?,
            comm: from_csv(&dir.join("comm.csv"))?,
        })
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn from_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
