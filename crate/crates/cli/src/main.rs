use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use asyncfl_core::experiment::{run_experiment, ExperimentSpec};
use asyncfl_core::monitor::MetricStore;
use asyncfl_core::schedule::LrRegime;
use asyncfl_core::sim::{read_log, replay_check, run_scenario, Scenario, Simulation};
use asyncfl_core::strategy::StrategyKind;
use asyncfl_monitor::AppState;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asyncfl", version, about = "Asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep strategies x LR regimes x seeds and write the report bundle.
    Run {
        /// Scenario file; built-in defaults when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "asyn2f,fedavg,mstep_kafl")]
        strategy: Vec<StrategyKind>,
        #[arg(long, value_delimiter = ',', default_value = "fixed,sync,async")]
        lr: Vec<LrRegime>,
        #[arg(long, value_delimiter = ',', conflicts_with = "repeats")]
        seeds: Option<Vec<u64>>,
        /// Shorthand for seeds 1..=N.
        #[arg(long)]
        repeats: Option<u64>,
        /// Time-to-target threshold as a fraction of centralized accuracy.
        #[arg(long, default_value_t = 0.9)]
        target: f64,
        #[arg(long)]
        out: PathBuf,
        /// Run the seeds of each cell on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Re-run the scenario behind an event log and compare event by event.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Defaults to `scenario.txt` next to the log.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Serve the metrics/control HTTP interface, optionally driving a live run.
    ServeMonitor {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Scenario to simulate while serving.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Append accepted metric events to this JSON-lines file.
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Wall-clock milliseconds per simulated time unit.
        #[arg(long, default_value_t = 0.0)]
        pace_ms: f64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario, Failure> {
    let Some(path) = path else {
        return Ok(Scenario::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Scenario::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // bad arguments are configuration errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            strategy,
            lr,
            seeds,
            repeats,
            target,
            out,
            parallel,
        } => cmd_run(scenario, strategy, lr, seeds, repeats, target, out, parallel),
        Command::Replay { log, scenario } => cmd_replay(&log, scenario),
        Command::ServeMonitor {
            port,
            host,
            scenario,
            journal,
            pace_ms,
        } => cmd_serve(&host, port, scenario, journal, pace_ms),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    scenario: Option<PathBuf>,
    strategies: Vec<StrategyKind>,
    regimes: Vec<LrRegime>,
    seeds: Option<Vec<u64>>,
    repeats: Option<u64>,
    target: f64,
    out: PathBuf,
    parallel: bool,
) -> Result<(), Failure> {
    let mut spec = ExperimentSpec::new(load_scenario(scenario.as_deref())?);
    if let Some(n) = repeats {
        if n == 0 {
            return Err(Failure::Config("--repeats must be at least 1".into()));
        }
        spec = spec.with_repeats(n);
    }
    if let Some(s) = seeds {
        spec.seeds = s;
    }
    spec.strategies = strategies;
    spec.regimes = regimes;
    spec.target_fraction = target;
    spec.out_dir = Some(out.clone());
    spec.parallel = parallel;
    spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let report = run_experiment(&spec).map_err(Failure::runtime)?;
    print!("{}", report.markdown());
    println!("\nwrote {}", out.display());
    Ok(())
}

fn cmd_replay(log: &Path, scenario: Option<PathBuf>) -> Result<(), Failure> {
    let file = std::fs::File::open(log).map_err(|e| Failure::Config(format!("{}: {e}", log.display())))?;
    let recorded = read_log(BufReader::new(file)).map_err(|e| Failure::Config(format!("{}: {e}", log.display())))?;
    let scenario_path = scenario.unwrap_or_else(|| log.with_file_name("scenario.txt"));
    let sc = load_scenario(Some(&scenario_path))?;
    let rerun = run_scenario(&sc).map_err(Failure::runtime)?;
    if replay_check(&recorded, &rerun.log) {
        println!("identical: {} events", recorded.len());
        return Ok(());
    }
    let at = recorded
        .iter()
        .zip(&rerun.log)
        .position(|(a, b)| a != b || a.time.to_bits() != b.time.to_bits())
        .unwrap_or(recorded.len().min(rerun.log.len()));
    Err(Failure::Runtime(format!(
        "replay diverged at event {at} (recorded {} events, re-run {})",
        recorded.len(),
        rerun.log.len()
    )))
}

fn cmd_serve(
    host: &str,
    port: u16,
    scenario: Option<PathBuf>,
    journal: Option<PathBuf>,
    pace_ms: f64,
) -> Result<(), Failure> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Failure::Config(format!("bad address {host}:{port}: {e}")))?;
    if !(pace_ms.is_finite() && pace_ms >= 0.0) {
        return Err(Failure::Config("--pace-ms must be finite and >= 0".into()));
    }
    let scenario = match scenario {
        Some(p) => Some(load_scenario(Some(&p))?),
        None => None,
    };
    let mut store = MetricStore::new();
    if let Some(j) = &journal {
        store = store
            .with_journal(j)
            .map_err(|e| Failure::Config(format!("{}: {e}", j.display())))?;
    }
    let store = store.shared();
    let state = AppState::attach(store.clone());

    let rt = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(Failure::runtime)?;
        let local = listener.local_addr().map_err(Failure::runtime)?;
        println!("listening on http://{local}");
        if let Some(sc) = scenario {
            std::thread::spawn(move || drive(sc, store, pace_ms));
        }
        asyncfl_monitor::serve_on(listener, state).await.map_err(Failure::runtime)
    })
}

/// Steps a simulation, sleeping `pace_ms` per simulated time unit.
fn drive(sc: Scenario, store: std::sync::Arc<std::sync::Mutex<MetricStore>>, pace_ms: f64) {
    let mut sim = match Simulation::with_monitor(sc, store) {
        Ok(s) => s,
        Err(e) => {
            tracing::error!(error = %e, "simulation setup failed");
            return;
        }
    };
    let mut last = sim.now();
    loop {
        match sim.step() {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                tracing::error!(error = %e, "simulation failed");
                return;
            }
        }
        let dt = sim.now() - last;
        last = sim.now();
        if pace_ms > 0.0 && dt > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(dt * pace_ms / 1000.0));
        }
    }
    tracing::info!(version = sim.server().version(), time = sim.now(), "simulation finished");
}
