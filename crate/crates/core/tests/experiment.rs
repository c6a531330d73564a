use std::collections::BTreeMap;
use std::path::Path;

use asyncfl_core::experiment::*;
use asyncfl_core::schedule::LrRegime;
use asyncfl_core::sim::Scenario;
use asyncfl_core::strategy::StrategyKind;

fn small() -> ExperimentSpec {
    let mut sc = Scenario::default();
    sc.server.stop.max_epochs = Some(8);
    sc.train.local_rounds_per_epoch = 1;
    let mut spec = ExperimentSpec::new(sc);
    spec.seeds = vec![1, 2];
    spec
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn grid_summary_and_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = small();
    spec.out_dir = Some(tmp.path().join("a"));
    let report = run_experiment(&spec).unwrap();
    assert_eq!(report.rows.len(), 9);
    let na: Vec<_> = report.rows.iter().filter(|r| r.runs.is_none()).collect();
    assert_eq!(na.len(), 1);
    assert_eq!((na[0].strategy, na[0].regime), (StrategyKind::Fedavg, LrRegime::AsyncDecay));
    assert_eq!(na[0].accuracy_cell(), "NA");
    assert_eq!(report.runs.len(), 8 * 2);

    let dir = tmp.path().join("a");
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 10);
    assert!(summary.lines().any(|l| l.starts_with("fedavg,async,NA,NA,")));
    assert!(std::fs::read_to_string(dir.join("summary.md")).unwrap().contains(" ± "));
    assert!(dir.join("compare_sync.svg").exists());
    assert!(dir.join("asyn2f_fixed/seed_2/accuracy.svg").exists());

    // summary statistics come back out of the raw CSVs
    for row in report.rows.iter().filter(|r| r.runs.is_some()) {
        let (m, s) = recompute_cell(&dir, row.strategy, row.regime, &spec.seeds).unwrap().unwrap();
        assert_eq!(Some(m), row.accuracy_mean);
        assert_eq!(Some(s), row.accuracy_std);
    }

    // identical bundle on a second run, sequential or parallel
    spec.out_dir = Some(tmp.path().join("b"));
    spec.parallel = true;
    let again = run_experiment(&spec).unwrap();
    assert_eq!(again, report);
    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("b")));
}

#[test]
fn repeats_expand_to_seeds() {
    let spec = small().with_repeats(3);
    assert_eq!(spec.seeds, vec![1, 2, 3]);
    let mut bad = small();
    bad.strategies.clear();
    assert!(run_experiment(&bad).is_err());
}

#[test]
fn epochs_to_target_on_a_run() {
    let mut spec = small();
    spec.strategies = vec![StrategyKind::Asyn2f];
    spec.regimes = vec![LrRegime::SyncDecay];
    spec.seeds = vec![1];
    let report = run_experiment(&spec).unwrap();
    let m = &report.runs[0].metrics;
    let first = epochs_to_target(m, 0.0).unwrap();
    assert_eq!(first.version, 1);
    assert_eq!(first.worker_epochs.len(), 5);
    assert!(first.worker_epochs.values().all(|&e| e >= 1));
    assert!(epochs_to_target(m, 1.01).is_none());
}
