//! Strategy × learning-rate-regime sweeps over seeds, with summary tables
//! and SVG curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{evaluate, fit_centralized};
use crate::schedule::LrRegime;
use crate::sim::{build_datasets, model_spec, run_scenario, write_log, Metrics, Scenario};
use crate::strategy::StrategyKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub strategies: Vec<StrategyKind>,
    pub regimes: Vec<LrRegime>,
    pub seeds: Vec<u64>,
    /// Time-to-target uses `target_fraction` × centralized accuracy.
    pub target_fraction: f64,
    pub out_dir: Option<PathBuf>,
    /// Run the seeds of each cell on separate threads.
    pub parallel: bool,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            strategies: vec![StrategyKind::Asyn2f, StrategyKind::Fedavg, StrategyKind::MstepKafl],
            regimes: vec![LrRegime::Fixed, LrRegime::SyncDecay, LrRegime::AsyncDecay],
            seeds: vec![1],
            target_fraction: 0.9,
            out_dir: None,
            parallel: false,
        }
    }

    /// Seeds `1..=repeats`.
    pub fn with_repeats(mut self, repeats: u64) -> Self {
        self.seeds = (1..=repeats).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.regimes.is_empty() || self.seeds.is_empty() {
            return Err(crate::Error::param(
                "experiment",
                "needs at least one strategy, regime and seed",
            ));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(crate::Error::param("target_fraction", "must be in (0, 1]"));
        }
        self.scenario
            .validate()
            .map_err(|e| crate::Error::param("scenario", e.to_string()))
    }
}

/// Synchronous FedAvg has no per-worker schedule to desynchronize.
pub fn is_applicable(kind: StrategyKind, regime: LrRegime) -> bool {
    !(kind == StrategyKind::Fedavg && regime == LrRegime::AsyncDecay)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: StrategyKind,
    pub regime: LrRegime,
    pub seed: u64,
    pub centralized_accuracy: f64,
    pub final_accuracy: Option<f64>,
    pub time_to_target: Option<f64>,
    pub versions: u64,
    pub complete: bool,
    pub end_time: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: StrategyKind,
    pub regime: LrRegime,
    /// `None` for combinations that are not applicable.
    pub runs: Option<usize>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub time_to_target_median: Option<f64>,
    pub reached: usize,
}

impl SummaryRow {
    /// "92.86 ± 0.27" in percent, or "NA".
    pub fn accuracy_cell(&self) -> String {
        match (self.accuracy_mean, self.accuracy_std) {
            (Some(m), Some(s)) => format!("{:.2} ± {:.2}", m * 100.0, s * 100.0),
            _ => "NA".into(),
        }
    }

    pub fn time_cell(&self) -> String {
        match (self.runs, self.time_to_target_median) {
            (None, _) => "NA".into(),
            (Some(_), Some(t)) => format!("{t}"),
            (Some(_), None) => "not reached".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn markdown(&self) -> String {
        let mut s = String::from(
            "| strategy | lr | runs | final accuracy (%) | median time to target |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let runs = r.runs.map_or("NA".into(), |n| n.to_string());
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.strategy.as_str(),
                r.regime.as_str(),
                runs,
                r.accuracy_cell(),
                r.time_cell()
            );
        }
        s
    }
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

/// Accuracy of logistic regression trained on the pooled data, measured on
/// the tester's held-out set.
pub fn centralized_accuracy(scenario: &Scenario) -> Result<f64> {
    let data = build_datasets(scenario)?;
    let spec = model_spec(&scenario.data);
    let t = &scenario.train;
    let w = fit_centralized(&spec, &data.full, 20, t.batch_size, t.lr_initial, t.momentum, scenario.seed)?;
    Ok(evaluate(&spec, &w, &data.test)?.accuracy)
}

fn run_dir(out: &Path, kind: StrategyKind, regime: LrRegime, seed: u64) -> PathBuf {
    out.join(format!("{}_{}", kind.as_str(), regime.as_str()))
        .join(format!("seed_{seed}"))
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut central = BTreeMap::new();
    for &seed in &spec.seeds {
        let sc = spec.scenario.clone().with_variant(StrategyKind::Asyn2f, LrRegime::Fixed, seed);
        central.insert(seed, centralized_accuracy(&sc)?);
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &kind in &spec.strategies {
        for &regime in &spec.regimes {
            if !is_applicable(kind, regime) {
                rows.push(SummaryRow {
                    strategy: kind,
                    regime,
                    runs: None,
                    accuracy_mean: None,
                    accuracy_std: None,
                    time_to_target_median: None,
                    reached: 0,
                });
                continue;
            }
            let cell: Vec<RunRecord> = if spec.parallel {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = spec
                        .seeds
                        .iter()
                        .map(|&seed| {
                            let c = central[&seed];
                            scope.spawn(move || run_one(spec, kind, regime, seed, c))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("experiment thread panicked"))
                        .collect::<Result<_>>()
                })?
            } else {
                spec.seeds
                    .iter()
                    .map(|&seed| run_one(spec, kind, regime, seed, central[&seed]))
                    .collect::<Result<_>>()?
            };
            rows.push(summarize(kind, regime, &cell));
            runs.extend(cell);
        }
    }
    let report = ExperimentReport { rows, runs };
    if let Some(dir) = &spec.out_dir {
        write_summary(dir, &report)?;
        for &regime in &spec.regimes {
            let first = spec.seeds[0];
            let series: Vec<(String, Vec<(f64, f64)>)> = report
                .runs
                .iter()
                .filter(|r| r.regime == regime && r.seed == first)
                .map(|r| {
                    let c = r.metrics.tester_curve().iter().map(|c| (c.1, c.2)).collect();
                    (r.strategy.as_str().to_string(), c)
                })
                .collect();
            let title = format!("tester accuracy, lr {}, seed {first}", regime.as_str());
            std::fs::write(
                dir.join(format!("compare_{}.svg", regime.as_str())),
                svg_chart(&title, &series, None),
            )?;
        }
    }
    Ok(report)
}

fn run_one(
    spec: &ExperimentSpec,
    kind: StrategyKind,
    regime: LrRegime,
    seed: u64,
    central: f64,
) -> Result<RunRecord> {
    let sc = spec.scenario.clone().with_variant(kind, regime, seed);
    tracing::info!(strategy = kind.as_str(), lr = regime.as_str(), seed, "running");
    let out = run_scenario(&sc)?;
    let target = spec.target_fraction * central;
    if let Some(dir) = &spec.out_dir {
        let d = run_dir(dir, kind, regime, seed);
        out.metrics.write_dir(&d)?;
        let mut buf = Vec::new();
        write_log(&out.log, &mut buf)?;
        std::fs::write(d.join("events.jsonl"), buf)?;
        std::fs::write(d.join("scenario.txt"), sc.to_text())?;
        let curve: Vec<(f64, f64)> = out.metrics.tester_curve().iter().map(|c| (c.1, c.2)).collect();
        let title = format!("{} / {} / seed {seed}", kind.as_str(), regime.as_str());
        std::fs::write(
            d.join("accuracy.svg"),
            svg_chart(&title, &[(kind.as_str().to_string(), curve)], Some(target)),
        )?;
    }
    Ok(RunRecord {
        strategy: kind,
        regime,
        seed,
        centralized_accuracy: central,
        final_accuracy: out.metrics.final_accuracy(),
        time_to_target: out.metrics.time_to_accuracy(target),
        versions: out.final_record.version,
        complete: out.complete,
        end_time: out.end_time,
        metrics: out.metrics,
    })
}

fn summarize(kind: StrategyKind, regime: LrRegime, cell: &[RunRecord]) -> SummaryRow {
    let finals: Vec<f64> = cell.iter().filter_map(|r| r.final_accuracy).collect();
    let times: Vec<f64> = cell.iter().filter_map(|r| r.time_to_target).collect();
    let ms = mean_std(&finals);
    SummaryRow {
        strategy: kind,
        regime,
        runs: Some(cell.len()),
        accuracy_mean: ms.map(|m| m.0),
        accuracy_std: ms.map(|m| m.1),
        // unreached runs count as infinitely slow
        time_to_target_median: if times.len() * 2 > cell.len() {
            let mut all: Vec<f64> = cell
                .iter()
                .map(|r| r.time_to_target.unwrap_or(f64::INFINITY))
                .collect();
            all.sort_by(f64::total_cmp);
            median(&all)
        } else {
            None
        },
        reached: times.len(),
    }
}

#[derive(Debug, Serialize)]
struct SummaryCsvRow<'a> {
    strategy: &'a str,
    lr: &'a str,
    runs: String,
    final_accuracy: String,
    accuracy_mean: Option<f64>,
    accuracy_std: Option<f64>,
    time_to_target_median: String,
    reached: usize,
}

fn write_summary(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))
        .map_err(|e| crate::Error::Io(e.to_string()))?;
    for r in &report.rows {
        w.serialize(SummaryCsvRow {
            strategy: r.strategy.as_str(),
            lr: r.regime.as_str(),
            runs: r.runs.map_or("NA".into(), |n| n.to_string()),
            final_accuracy: r.accuracy_cell(),
            accuracy_mean: r.accuracy_mean,
            accuracy_std: r.accuracy_std,
            time_to_target_median: r.time_cell(),
            reached: r.reached,
        })
        .map_err(|e| crate::Error::Io(e.to_string()))?;
    }
    w.flush()?;
    std::fs::write(dir.join("summary.md"), report.markdown())?;
    Ok(())
}

/// Recomputes (mean, std) of final accuracy for one cell from the
/// `global.csv` files written by [`run_experiment`].
pub fn recompute_cell(
    dir: &Path,
    kind: StrategyKind,
    regime: LrRegime,
    seeds: &[u64],
) -> Result<Option<(f64, f64)>> {
    let mut finals = Vec::new();
    for &seed in seeds {
        let m = Metrics::read_dir(&run_dir(dir, kind, regime, seed))?;
        finals.extend(m.final_accuracy());
    }
    Ok(mean_std(&finals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReach {
    pub version: u64,
    pub time: f64,
    /// Epochs each worker had completed by `time`.
    pub worker_epochs: BTreeMap<String, u64>,
}

/// First global version whose tester accuracy reaches `target`, with the
/// worker epoch counts at the moment it was measured.
pub fn epochs_to_target(metrics: &Metrics, target: f64) -> Option<TargetReach> {
    let (version, time, _) = metrics
        .tester_curve()
        .into_iter()
        .find(|c| c.2 >= target)?;
    let mut worker_epochs = BTreeMap::new();
    for e in &metrics.epochs {
        let n = worker_epochs.entry(e.worker.clone()).or_insert(0);
        if e.end <= time {
            *n = (*n).max(e.epoch);
        }
    }
    Some(TargetReach {
        version,
        time,
        worker_epochs,
    })
}

/// A minimal static line chart: x = simulated time, y = accuracy in [0, 1].
pub fn svg_chart(title: &str, series: &[(String, Vec<(f64, f64)>)], guide: Option<f64>) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let x_max = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">t={x_max}</text>"#,
        W - PAD,
        H - PAD + 16.0
    );
    for y in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y}</text>"#,
            PAD - 4.0,
            sy(y) + 4.0
        );
    }
    if let Some(g) = guide {
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" x2="{}" y1="{y}" y2="{y}" stroke="gray" stroke-dasharray="4 4"/>"#,
            W - PAD,
            y = sy(g)
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 100.0,
            PAD + 14.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
