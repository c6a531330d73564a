//! Python bindings: scenarios, the simulator, the aggregation rules, the
//! learning-rate schedule and the wire codec.

use asyncfl_core::experiment::{self, ExperimentSpec};
use asyncfl_core::schedule::{self, LrRegime};
use asyncfl_core::sim::{self, SimEvent, SimOutcome};
use asyncfl_core::strategy::{self, GlobalModelRecord, LocalModelSubmission, StrategyKind};
use asyncfl_core::{wire, ParameterVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

const DEFAULT_EPS: f64 = 1e-8;

/// `(strategy, lr, runs, accuracy, time_to_target)`.
type SummaryTuple = (String, String, Option<usize>, String, String);

/// `(worker_id, ratio, weight)`.
type ShareTuple = (String, f64, f64);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pv(values: Vec<f64>) -> PyResult<ParameterVector> {
    ParameterVector::new(values).map_err(value_err)
}

#[pyclass(name = "Scenario", module = "asyncfl", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: sim::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Built-in desk-scale defaults: five trainers, a tester, 2-class data.
    #[new]
    fn new() -> Self {
        Self {
            inner: sim::Scenario::default(),
        }
    }

    /// Parses the `key = value` scenario format. Errors name the line.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        sim::Scenario::parse(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Copy with strategy, learning-rate regime and seed applied.
    fn with_variant(&self, strategy: &str, lr: &str, seed: u64) -> PyResult<Self> {
        let kind: StrategyKind = strategy.parse().map_err(value_err)?;
        let regime: LrRegime = lr.parse().map_err(value_err)?;
        Ok(Self {
            inner: self.inner.clone().with_variant(kind, regime, seed),
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn trainers(&self) -> usize {
        self.inner.trainer_count()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(seed={}, trainers={}, duration={})",
            self.inner.seed,
            self.inner.trainer_count(),
            self.inner.duration
        )
    }
}

/// Outcome of one simulated run.
#[pyclass(name = "RunResult", module = "asyncfl")]
struct PyRunResult {
    inner: SimOutcome,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn complete(&self) -> bool {
        self.inner.complete
    }

    #[getter]
    fn end_time(&self) -> f64 {
        self.inner.end_time
    }

    #[getter]
    fn version(&self) -> u64 {
        self.inner.final_record.version
    }

    #[getter]
    fn final_weights(&self) -> Vec<f64> {
        self.inner.final_record.weights.as_slice().to_vec()
    }

    #[getter]
    fn final_accuracy(&self) -> Option<f64> {
        self.inner.metrics.final_accuracy()
    }

    /// `(version, time, accuracy)` per tested global model.
    fn tester_curve(&self) -> Vec<(u64, f64, f64)> {
        self.inner.metrics.tester_curve()
    }

    fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        self.inner.metrics.time_to_accuracy(target)
    }

    /// The event log as JSON lines.
    fn log_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        sim::write_log(&self.inner.log, &mut buf).map_err(value_err)?;
        String::from_utf8(buf).map_err(value_err)
    }

    fn global_csv(&self) -> PyResult<String> {
        self.inner.metrics.global_csv().map_err(value_err)
    }

    fn epochs_csv(&self) -> PyResult<String> {
        self.inner.metrics.epochs_csv().map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.log.len()
    }
}

/// Runs a scenario to completion. The GIL is released while it runs.
#[pyfunction]
fn run_scenario(py: Python<'_>, scenario: &PyScenario) -> PyResult<PyRunResult> {
    let sc = scenario.inner.clone();
    py.detach(move || sim::run_scenario(&sc))
        .map(|inner| PyRunResult { inner })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn parse_log(text: &str) -> PyResult<Vec<SimEvent>> {
    sim::read_log(text.as_bytes()).map_err(value_err)
}

/// True iff two JSON-lines event logs are identical event by event.
#[pyfunction]
fn replay_check(log_a: &str, log_b: &str) -> PyResult<bool> {
    Ok(sim::replay_check(&parse_log(log_a)?, &parse_log(log_b)?))
}

/// Runs the strategy x regime x seed grid. Returns the markdown summary
/// and one `(strategy, lr, runs, accuracy, time_to_target)` tuple per cell.
#[pyfunction]
#[pyo3(signature = (scenario, strategies, lrs, seeds, out_dir=None, parallel=false))]
fn run_experiment(
    py: Python<'_>,
    scenario: &PyScenario,
    strategies: Vec<String>,
    lrs: Vec<String>,
    seeds: Vec<u64>,
    out_dir: Option<std::path::PathBuf>,
    parallel: bool,
) -> PyResult<(String, Vec<SummaryTuple>)> {
    let mut spec = ExperimentSpec::new(scenario.inner.clone());
    spec.strategies = strategies.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(value_err)?;
    spec.regimes = lrs.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(value_err)?;
    spec.seeds = seeds;
    spec.out_dir = out_dir;
    spec.parallel = parallel;
    spec.validate().map_err(value_err)?;
    let report = py
        .detach(move || experiment::run_experiment(&spec))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let rows = report
        .rows
        .iter()
        .map(|r| {
            (
                r.strategy.as_str().to_string(),
                r.regime.as_str().to_string(),
                r.runs,
                r.accuracy_cell(),
                r.time_cell(),
            )
        })
        .collect();
    Ok((report.markdown(), rows))
}

/// One local model upload as seen by the server.
#[pyclass(name = "Submission", module = "asyncfl", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PySubmission {
    worker_id: String,
    weights: Vec<f64>,
    loss: f64,
    qod: f64,
    data_size: u64,
    global_version_used: u64,
    submit_time: f64,
    arrival: u64,
}

#[pymethods]
impl PySubmission {
    #[new]
    #[pyo3(signature = (worker_id, weights, loss, qod, data_size, global_version_used, submit_time=0.0, arrival=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        worker_id: String,
        weights: Vec<f64>,
        loss: f64,
        qod: f64,
        data_size: u64,
        global_version_used: u64,
        submit_time: f64,
        arrival: u64,
    ) -> Self {
        Self {
            worker_id,
            weights,
            loss,
            qod,
            data_size,
            global_version_used,
            submit_time,
            arrival,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Submission({:?}, loss={}, qod={}, data_size={}, used={})",
            self.worker_id, self.loss, self.qod, self.data_size, self.global_version_used
        )
    }
}

impl PySubmission {
    fn to_core(&self) -> PyResult<LocalModelSubmission> {
        Ok(LocalModelSubmission {
            worker_id: self.worker_id.clone(),
            weights: pv(self.weights.clone())?,
            loss: self.loss,
            qod: self.qod,
            data_size: self.data_size,
            global_version_used: self.global_version_used,
            submit_time: self.submit_time,
            arrival: self.arrival,
        })
    }
}

fn to_core_all(subs: &[PyRef<'_, PySubmission>]) -> PyResult<Vec<LocalModelSubmission>> {
    subs.iter().map(|s| s.to_core()).collect()
}

/// Unnormalized contribution ratio of one submission to `new_version`.
#[pyfunction]
#[pyo3(signature = (sub, new_version, loss_epsilon=DEFAULT_EPS))]
fn contribution_ratio(sub: PyRef<'_, PySubmission>, new_version: u64, loss_epsilon: f64) -> PyResult<f64> {
    strategy::contribution_ratio(&sub.to_core()?, new_version, loss_epsilon).map_err(value_err)
}

#[pyfunction]
fn normalize_ratios(ratios: Vec<f64>) -> PyResult<Vec<f64>> {
    strategy::normalize_ratios(&ratios).map_err(value_err)
}

/// Aggregates a queue into `new_version`. Returns the new weights and
/// `(worker_id, ratio, weight)` per retained submission.
#[pyfunction]
#[pyo3(signature = (queue, new_version, loss_epsilon=DEFAULT_EPS))]
fn aggregate_asyn2f(
    queue: Vec<PyRef<'_, PySubmission>>,
    new_version: u64,
    loss_epsilon: f64,
) -> PyResult<(Vec<f64>, Vec<ShareTuple>)> {
    let agg = strategy::aggregate_asyn2f(&to_core_all(&queue)?, new_version, loss_epsilon).map_err(value_err)?;
    let shares = agg.shares.into_iter().map(|s| (s.worker_id, s.ratio, s.weight)).collect();
    Ok((agg.record.weights.into_vec(), shares))
}

/// Worker-side mixing weight of the local model against a released global.
#[pyfunction]
#[pyo3(signature = (qod, data_size, current_loss, global_avg_qod, global_total_data_size, global_avg_loss, beta=0.5, loss_epsilon=DEFAULT_EPS))]
#[allow(clippy::too_many_arguments)]
fn local_mix_coefficient(
    qod: f64,
    data_size: u64,
    current_loss: f64,
    global_avg_qod: f64,
    global_total_data_size: u64,
    global_avg_loss: f64,
    beta: f64,
    loss_epsilon: f64,
) -> PyResult<f64> {
    let global = GlobalModelRecord {
        version: 0,
        weights: pv(vec![0.0])?,
        avg_qod: global_avg_qod,
        total_data_size: global_total_data_size,
        avg_loss: global_avg_loss,
        contributors: Vec::new(),
    };
    strategy::local_mix_coefficient(qod, data_size, current_loss, &global, beta, loss_epsilon).map_err(value_err)
}

#[pyfunction]
fn merge_local(global_weights: Vec<f64>, local_j: Vec<f64>, local_jm1: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    strategy::merge_local(&pv(global_weights)?, &pv(local_j)?, &pv(local_jm1)?, alpha)
        .map(ParameterVector::into_vec)
        .map_err(value_err)
}

#[pyfunction]
fn aggregate_fedavg(subs: Vec<PyRef<'_, PySubmission>>, k: usize) -> PyResult<Vec<f64>> {
    let core = to_core_all(&subs)?;
    let refs: Vec<&LocalModelSubmission> = core.iter().collect();
    strategy::aggregate_fedavg(&refs, k)
        .map(ParameterVector::into_vec)
        .map_err(value_err)
}

/// One M-Step KAFL receipt. Returns the new global and the buffer to carry.
#[pyfunction]
fn aggregate_mstep_kafl(
    incoming: Vec<f64>,
    buffer: Vec<Vec<f64>>,
    current_global: Vec<f64>,
    m: usize,
    alpha: f64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let buffer = buffer.into_iter().map(pv).collect::<PyResult<Vec<_>>>()?;
    let (g, buf) = strategy::aggregate_mstep_kafl(&pv(incoming)?, buffer, &pv(current_global)?, m, alpha)
        .map_err(value_err)?;
    Ok((g.into_vec(), buf.into_iter().map(ParameterVector::into_vec).collect()))
}

#[pyfunction]
fn cosine_decay_lr(step: u64, total_steps: u64, lr_initial: f64) -> f64 {
    schedule::cosine_decay_lr(step, total_steps, lr_initial)
}

/// Validates a wire message and returns its canonical encoding.
#[pyfunction]
fn encode_message<'py>(py: Python<'py>, json: &str) -> PyResult<Bound<'py, PyBytes>> {
    let msg = wire::decode(json.as_bytes()).map_err(value_err)?;
    let bytes = wire::encode(&msg).map_err(value_err)?;
    Ok(PyBytes::new(py, &bytes))
}

/// Decodes and validates a wire message. Returns `(message_type, json)`.
#[pyfunction]
fn decode_message(data: &[u8]) -> PyResult<(String, String)> {
    let msg = wire::decode(data).map_err(value_err)?;
    let bytes = wire::encode(&msg).map_err(value_err)?;
    Ok((
        msg.message_type().as_str().to_string(),
        String::from_utf8(bytes).map_err(value_err)?,
    ))
}

#[pymodule]
pub fn asyncfl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PySubmission>()?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(replay_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(contribution_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_ratios, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_asyn2f, m)?)?;
    m.add_function(wrap_pyfunction!(local_mix_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(merge_local, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_fedavg, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_mstep_kafl, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_decay_lr, m)?)?;
    m.add_function(wrap_pyfunction!(encode_message, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
