//! Runs the repetitions of one configured experiment.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tokio::sync::Mutex;
use tokio::time::Instant;

use super::load::{generate_load, LoadProfile};
use super::metrics::{load_runs, write_artifacts, RepSummary, ReplayError, RequestCounts};
use super::{ModelParams, ProbeParams, StartMode};
use crate::config::{ConfigError, MonitoringBlock, RunConfig};
use crate::eventlog::{EventLog, EventLogError, Record, RunEndRecord, RunStartRecord, RunStatus};
use crate::fault::{inject, run_plan, ContainerTarget, FaultTargets};
use crate::net::{allocate_port, loopback};
use crate::service::{Balancer, DependencyStub, MockServiceConfig};
use crate::signal::Transport;
use crate::state_machine::{first_probe_due, ProbeKind};
use crate::supervisor::{ContainerSpec, Supervisor, SupervisorError, SupervisorOptions};
use crate::time::RunClock;

/// Unix socket paths longer than this do not fit in `sockaddr_un`.
const MAX_SOCKET_PATH: usize = 100;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot create {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    EventLog(#[from] EventLogError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub rundir: PathBuf,
    pub seed: u64,
    pub mock_binary: PathBuf,
}

#[derive(Debug)]
pub struct RunReport {
    pub rundir: PathBuf,
    pub summaries: Vec<RepSummary>,
    /// Repetition number and reason, for each aborted repetition.
    pub aborted: Vec<(u32, String)>,
}

/// Finds the mock service binary: an explicit path, else next to the
/// running executable or one directory up (test binaries live in `deps/`).
pub fn resolve_mock_binary(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let name = format!("sentinel-mock{}", std::env::consts::EXE_SUFFIX);
    if let Ok(exe) = std::env::current_exe() {
        if let Some(dir) = exe.parent() {
            for candidate in [dir.join(&name), dir.join("..").join(&name)] {
                if candidate.is_file() {
                    return candidate;
                }
            }
        }
    }
    PathBuf::from(name)
}

pub fn model_params(cfg: &RunConfig) -> ModelParams {
    let block = cfg.selected_monitoring();
    let probes: HashMap<ProbeKind, ProbeParams> = block
        .probes
        .iter()
        .map(|p| (p.kind, ProbeParams::from(p)))
        .collect();
    ModelParams {
        experiment: cfg.experiment.name.clone(),
        monitoring: cfg.experiment.monitoring.clone(),
        policy: block.policy,
        window_s: cfg.experiment.window_secs(),
        request_timeout_s: cfg.experiment.request_timeout.as_secs_f64(),
        request_rate: cfg.experiment.request_rate,
        load_model: cfg.experiment.load_model,
        repetitions: cfg.experiment.repetitions,
        containers: cfg.containers.len() as u32,
        init_time_s: cfg.load_target().init_time.as_secs_f64(),
        startup: probes.get(&ProbeKind::Startup).cloned(),
        readiness: probes.get(&ProbeKind::Readiness).cloned(),
        liveness: probes.get(&ProbeKind::Liveness).cloned(),
        signal_transport: block.signal.as_ref().map(|s| s.transport),
        monitor_start_delay_s: block
            .signal
            .as_ref()
            .map(|s| s.monitor_start_delay.as_secs_f64()),
    }
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn socket_path(repdir: &Path, rep: u32) -> PathBuf {
    let preferred = repdir.join("sentinel.sock");
    if preferred.as_os_str().len() <= MAX_SOCKET_PATH {
        return preferred;
    }
    std::env::temp_dir().join(format!("sentinel-{}-{rep}.sock", std::process::id()))
}

/// The first liveness probe slot of a container started at
/// `container_start` that falls at or after `earliest`. Opening the window
/// on a slot makes a fault offset within one interval set the failure
/// phase relative to the probes.
fn align_to_liveness_grid(
    block: &MonitoringBlock,
    clock: RunClock,
    container_start: Duration,
    earliest: Instant,
) -> Instant {
    let Some(live) = block.probes.iter().find(|p| p.kind == ProbeKind::Liveness) else {
        return earliest;
    };
    let first_due = first_probe_due(live, &block.policy(), container_start).as_nanos() as i128;
    let interval = live.interval.as_nanos() as i128;
    let wanted = clock.offset_of(earliest.into_std()).as_nanos() as i128;
    let k = -(first_due - wanted).div_euclid(interval);
    let slot = (first_due + k * interval).max(0);
    Instant::from_std(clock.at(Duration::from_nanos(slot as u64)))
}

/// Runs every repetition in sequence, then writes the CSV artifacts from
/// the event logs.
pub async fn run_experiment(
    cfg: &RunConfig,
    opts: &RunOptions,
) -> Result<RunReport, ExperimentError> {
    cfg.validate()?;
    create_dir(&opts.rundir)?;
    let mut aborted = vec![];
    for rep in 1..=cfg.experiment.repetitions {
        if let Err(reason) = run_repetition(cfg, opts, rep).await? {
            tracing::warn!(rep, %reason, "repetition aborted");
            aborted.push((rep, reason));
        }
    }
    let runs = load_runs(&opts.rundir)?;
    let summaries = write_artifacts(&runs, &opts.rundir)?;
    Ok(RunReport {
        rundir: opts.rundir.clone(),
        summaries,
        aborted,
    })
}

/// The outer error is a harness failure; the inner one aborts only this
/// repetition and is recorded in its log.
async fn run_repetition(
    cfg: &RunConfig,
    opts: &RunOptions,
    rep: u32,
) -> Result<Result<(), String>, ExperimentError> {
    let repdir = opts.rundir.join(format!("rep-{rep:02}"));
    if repdir.exists() {
        std::fs::remove_dir_all(&repdir).map_err(|source| ExperimentError::Io {
            path: repdir.clone(),
            source,
        })?;
    }
    for sub in ["logs", "faults"] {
        create_dir(&repdir.join(sub))?;
    }
    let clock = RunClock::start();
    let log = Arc::new(EventLog::create(repdir.join("events.ndjson"), clock)?);
    log.append(&Record::RunStart(RunStartRecord {
        timestamp: 0,
        repetition: rep,
        wall_clock_ms: clock.wall_origin_ms(),
        plan: model_params(cfg),
    }));
    let outcome = drive(cfg, opts, rep, &repdir, &log).await;
    let (status, reason) = match &outcome {
        Ok(()) => (RunStatus::Completed, String::new()),
        Err(reason) => (RunStatus::Aborted, reason.clone()),
    };
    log.append(&Record::RunEnd(RunEndRecord {
        timestamp: clock.now_ms(),
        status,
        reason,
    }));
    log.flush();
    Ok(outcome)
}

async fn drive(
    cfg: &RunConfig,
    opts: &RunOptions,
    rep: u32,
    repdir: &Path,
    log: &Arc<EventLog>,
) -> Result<(), String> {
    let plan = &cfg.experiment;
    let block = cfg.selected_monitoring();
    let clock = *log.clock();
    let port = || allocate_port().map_err(|e| format!("cannot allocate a port: {e}"));

    let mut deps = HashMap::new();
    for name in &cfg.dependencies {
        let stub = DependencyStub::start(loopback(port()?))
            .await
            .map_err(|e| format!("dependency {name}: {e}"))?;
        deps.insert(name.clone(), stub);
    }
    let dep_addrs: HashMap<&str, _> = deps.iter().map(|(n, s)| (n.as_str(), s.addr())).collect();

    let socket = block
        .signal
        .as_ref()
        .filter(|s| s.transport == Transport::Socket)
        .map(|_| socket_path(repdir, rep));
    let supervisor = Supervisor::start(
        Arc::clone(log),
        SupervisorOptions {
            log_dir: repdir.join("logs"),
            notify_socket: socket.clone(),
        },
    )
    .map_err(|e: SupervisorError| e.to_string())?;

    let probes = block.probe_set().map_err(|e| e.to_string())?;
    let mut specs = vec![];
    let mut containers = HashMap::new();
    for c in &cfg.containers {
        let service = cfg.service(&c.service).expect("validated");
        let addr = loopback(port()?);
        let latency_file = repdir.join("faults").join(format!("{}.latency_ms", c.id));
        let command = match &service.command {
            Some(cmd) => cmd.clone(),
            None => {
                let mut mock = MockServiceConfig::new(addr);
                mock.init_time_ms = service.init_time.as_millis() as u64;
                mock.dependency = service.dependency.as_deref().map(|d| dep_addrs[d]);
                mock.ready_log_line = service.ready_log_line.clone();
                mock.unhealthy_log_line = service.unhealthy_log_line.clone();
                mock.response_latency_ms = service.response_latency_ms;
                mock.run_mode = service.run_mode;
                mock.http500_window_ms = service.http500_window_ms;
                mock.fault_file = Some(latency_file.clone());
                mock.heartbeat_interval_ms =
                    service.heartbeat_interval.map(|d| d.as_millis() as u64);
                let mut cmd = vec![opts.mock_binary.display().to_string()];
                cmd.extend(mock.to_args());
                cmd
            }
        };
        containers.insert(c.id.clone(), ContainerTarget { addr, latency_file });
        specs.push(ContainerSpec {
            container_id: c.id.clone(),
            service: c.service.clone(),
            command,
            env: vec![("SENTINEL_PORT".into(), addr.port().to_string())],
            addr,
            run_mode: service.run_mode,
            termination_grace_period: block.termination_grace_period,
            probes: probes.clone(),
            policy: block.policy(),
            signal: block.signal.clone(),
            init_time: service.init_time,
            backoff_reset_after: block.backoff_reset_after,
        });
    }
    let targets = Arc::new(FaultTargets {
        containers,
        dependencies: Mutex::new(deps),
    });
    let mut faults = cfg.faults.resolve(opts.seed, rep - 1, plan.repetitions);

    let result = async {
        let measure_start = match plan.start {
            StartMode::Immediate => {
                let start = Instant::now();
                log.append(&Record::LoadStart {
                    timestamp: clock.offset_of(start.into_std()).as_millis() as u64,
                });
                // Faults at offset zero land before anything is spawned.
                let split = faults.iter().take_while(|f| f.at.is_zero()).count();
                for fault in faults.drain(..split) {
                    inject(&fault, &targets, log).await;
                }
                for spec in specs {
                    supervisor.spawn(spec).await.map_err(|e| e.to_string())?;
                }
                start
            }
            StartMode::AfterReady => {
                for spec in specs {
                    supervisor.spawn(spec).await.map_err(|e| e.to_string())?;
                }
                let want = cfg.containers.len();
                let mut ready = supervisor.ready_watch();
                tokio::time::timeout(plan.ready_timeout, ready.wait_for(|r| r.total() >= want))
                    .await
                    .map_err(|_| {
                        format!(
                            "containers not ready within {}s",
                            plan.ready_timeout.as_secs_f64()
                        )
                    })?
                    .map_err(|_| "supervisor stopped before containers were ready".to_string())?;
                let earliest = Instant::now() + plan.warmup;
                let first = &cfg.containers[0].id;
                let start = match supervisor.status(first).await {
                    Some(status) => {
                        align_to_liveness_grid(block, clock, status.container_start, earliest)
                    }
                    None => earliest,
                };
                tokio::time::sleep_until(start).await;
                log.append(&Record::LoadStart {
                    timestamp: clock.offset_of(start.into_std()).as_millis() as u64,
                });
                start
            }
        };

        let fault_tasks = run_plan(faults, measure_start, Arc::clone(&targets), Arc::clone(log));
        let start_offset =
            ChaCha8Rng::seed_from_u64(opts.seed ^ u64::from(rep)).random_range(0..1024);
        let balancer = Arc::new(Balancer::new(
            cfg.load_target().name.clone(),
            supervisor.ready_watch(),
            plan.request_timeout,
            plan.unavailable,
            start_offset,
            clock,
        ));
        let profile = LoadProfile {
            rate: plan.request_rate,
            window: Duration::from_secs(plan.window_secs()),
            model: plan.load_model,
            path: "/".into(),
        };
        let counts = generate_load(balancer, &profile, measure_start).await;
        // Samples run up to and including second W.
        tokio::time::sleep_until(
            measure_start + Duration::from_secs(plan.window_secs()) + Duration::from_millis(50),
        )
        .await;
        for task in fault_tasks {
            task.abort();
        }
        let counts = counts.map_err(|e| e.to_string())?;
        for (second, c) in counts.iter().enumerate() {
            log.append(&Record::Metrics(RequestCounts::new(
                clock.now_ms(),
                second as u64,
                *c,
            )));
        }
        Ok(())
    }
    .await;
    supervisor.shutdown().await;
    if let Some(path) = socket {
        let _ = std::fs::remove_file(path);
    }
    result
}
