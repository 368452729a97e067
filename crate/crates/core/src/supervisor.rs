//! Process lifecycle: spawns containers as local process groups, applies
//! monitoring actions, terminates with a grace period, and relaunches
//! after the crash-loop backoff.
//!
//! One event loop owns every [`ContainerStatus`]. Probe results, signals,
//! process exits and timers reach it as messages on a single queue, so the
//! updates for a container are applied in arrival order.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::net::SocketAddr;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{ExitStatus, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::eventlog::{EventLog, MonitorNote, Record};
use crate::probe::{ProbeEngine, ProbeOutcomeRecord, ProbeScheduleHandle, ProbeTarget};
use crate::signal::{
    dispatch, valid_container_id, watch_logs, watchdog_check, LogWatchItem, Signal, SignalEvent,
    SignalMonitorConfig, SignalRecord, SocketListener, Transport,
};
use crate::state_machine::{
    compute_backoff_delay, on_runtime_exit, record_probe_result, Action, ContainerStatus,
    MonitoringPolicy, Phase, PolicyVariant, ProbeSet, StateError,
};
use crate::time::RunClock;

/// Shortest grace period a container may be given.
pub const MIN_GRACE_PERIOD: Duration = Duration::from_secs(2);
/// Default running time after which the crash-loop backoff starts over.
pub const DEFAULT_BACKOFF_RESET: Duration = Duration::from_secs(600);
const WATCHDOG_TICK: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// The request handler is the container's main process; killing it
    /// ends the container.
    #[default]
    HandlerAsPid1,
    /// The handler runs under a shell that outlives it and hangs.
    HandlerUnderShell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleKind {
    Spawned,
    Started,
    Ready,
    Unready,
    Unhealthy,
    RestartQueued,
    BackoffStarted,
    SigtermSent,
    SigkillSent,
    Exited,
    Restarted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub timestamp: u64,
    pub container_id: String,
    pub event: LifecycleKind,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ContainerSpec {
    pub container_id: String,
    /// Ready-set key; containers of one service are balanced together.
    pub service: String,
    /// Program and arguments.
    pub command: Vec<String>,
    pub env: Vec<(String, String)>,
    /// Where probes connect.
    pub addr: SocketAddr,
    pub run_mode: RunMode,
    pub termination_grace_period: Duration,
    pub probes: ProbeSet,
    pub policy: MonitoringPolicy,
    pub signal: Option<SignalMonitorConfig>,
    pub init_time: Duration,
    pub backoff_reset_after: Duration,
}

impl ContainerSpec {
    pub fn validate(&self) -> Result<(), SupervisorError> {
        let bad = |reason: String| SupervisorError::InvalidSpec {
            id: self.container_id.clone(),
            reason,
        };
        if !valid_container_id(&self.container_id) {
            return Err(bad("container id must match [A-Za-z0-9._-]{1,64}".into()));
        }
        if self.command.is_empty() {
            return Err(bad("command is empty".into()));
        }
        if self.termination_grace_period < MIN_GRACE_PERIOD {
            return Err(bad(format!(
                "termination_grace_period {:?} is below the 2s minimum",
                self.termination_grace_period
            )));
        }
        self.policy.validate().map_err(|e| bad(e.to_string()))?;
        let signal_based = self.policy.variant == PolicyVariant::SignalBased;
        match (&self.signal, signal_based) {
            (Some(cfg), true) => cfg.validate().map_err(bad)?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(bad("signal config given without signal_based policy".into()))
            }
            (None, true) => return Err(bad("signal_based policy needs a signal config".into())),
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("container {id}: {reason}")]
    InvalidSpec { id: String, reason: String },
    #[error("container id {0} is already supervised")]
    DuplicateContainer(String),
    #[error("cannot create log directory {path}: {source}")]
    LogDir {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot bind signal socket {path}: {source}")]
    Socket {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("supervisor has stopped")]
    Stopped,
}

/// Result of applying one action to a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub status: ContainerStatus,
    /// Whether the container is in its service's ready set.
    pub in_ready_set: bool,
    pub events: Vec<LifecycleKind>,
    pub queue_restart: bool,
}

/// Applies a monitoring action to a status and ready-set membership.
///
/// Duplicates are idempotent; a restart is queued at most once while one
/// is pending, and readiness is ignored outside the live phases.
pub fn apply_action(mut status: ContainerStatus, in_ready_set: bool, action: Action) -> Applied {
    let mut events = Vec::new();
    let mut in_ready = in_ready_set;
    let mut queue_restart = false;
    match action {
        Action::None => {}
        Action::MarkStarted => {
            if status.phase.is_live() {
                events.push(LifecycleKind::Started);
            }
        }
        Action::MarkReady => {
            if status.phase.is_live() && status.started && status.healthy {
                status.ready = true;
                if !in_ready {
                    in_ready = true;
                    events.push(LifecycleKind::Ready);
                }
            } else {
                status.ready = false;
            }
        }
        Action::MarkUnready => {
            status.ready = false;
            if in_ready {
                in_ready = false;
                events.push(LifecycleKind::Unready);
            }
        }
        Action::MarkUnhealthy => {
            if matches!(
                status.phase,
                Phase::Initializing | Phase::Running | Phase::Exited
            ) {
                status.healthy = false;
                status.ready = false;
                status.phase = Phase::RestartQueued;
                in_ready = false;
                events.push(LifecycleKind::Unhealthy);
                events.push(LifecycleKind::RestartQueued);
                queue_restart = true;
            }
        }
    }
    if status.phase.restart_pending() || status.phase == Phase::Exited {
        status.ready = false;
        in_ready = false;
    }
    Applied {
        status,
        in_ready_set: in_ready,
        events,
        queue_restart,
    }
}

/// Ready containers per service, published as an immutable snapshot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadySet {
    services: BTreeMap<String, BTreeMap<String, SocketAddr>>,
}

impl ReadySet {
    pub fn ready(&self, service: &str) -> Vec<String> {
        self.services
            .get(service)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn endpoints(&self, service: &str) -> Vec<(String, SocketAddr)> {
        self.services
            .get(service)
            .map(|m| m.iter().map(|(k, v)| (k.clone(), *v)).collect())
            .unwrap_or_default()
    }

    pub fn insert(&mut self, service: &str, id: &str, addr: SocketAddr) {
        self.set(service, id, addr, true);
    }

    pub fn total(&self) -> usize {
        self.services.values().map(BTreeMap::len).sum()
    }

    fn set(&mut self, service: &str, id: &str, addr: SocketAddr, ready: bool) -> bool {
        let members = self.services.entry(service.to_string()).or_default();
        if ready {
            members.insert(id.to_string(), addr).is_none()
        } else {
            members.remove(id).is_some()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupervisorOptions {
    pub log_dir: PathBuf,
    /// Bind the signal socket here when any container uses it.
    pub notify_socket: Option<PathBuf>,
}

enum Msg {
    Spawn(
        Box<ContainerSpec>,
        oneshot::Sender<Result<(), SupervisorError>>,
    ),
    Probe(ProbeOutcomeRecord),
    Signal(Signal),
    LogWatch(LogWatchItem),
    Exited {
        id: String,
        generation: u32,
        status: std::io::Result<ExitStatus>,
    },
    GraceExpired {
        id: String,
        generation: u32,
    },
    BackoffDone {
        id: String,
        generation: u32,
    },
    Status(String, oneshot::Sender<Option<ContainerStatus>>),
    Shutdown(oneshot::Sender<()>),
}

impl From<ProbeOutcomeRecord> for Msg {
    fn from(r: ProbeOutcomeRecord) -> Self {
        Msg::Probe(r)
    }
}

impl From<Signal> for Msg {
    fn from(s: Signal) -> Self {
        Msg::Signal(s)
    }
}

impl From<LogWatchItem> for Msg {
    fn from(i: LogWatchItem) -> Self {
        Msg::LogWatch(i)
    }
}

type PidTable = Arc<Mutex<HashMap<String, i32>>>;

/// Handle to the supervisor event loop.
pub struct Supervisor {
    tx: mpsc::UnboundedSender<Msg>,
    ready: watch::Receiver<ReadySet>,
    pids: PidTable,
    task: Option<JoinHandle<()>>,
}

impl Supervisor {
    pub fn start(log: Arc<EventLog>, options: SupervisorOptions) -> Result<Self, SupervisorError> {
        std::fs::create_dir_all(&options.log_dir).map_err(|source| SupervisorError::LogDir {
            path: options.log_dir.clone(),
            source,
        })?;
        let (tx, rx) = mpsc::unbounded_channel();
        let socket = match &options.notify_socket {
            Some(path) => Some(SocketListener::bind(path.clone(), tx.clone()).map_err(
                |source| SupervisorError::Socket {
                    path: path.clone(),
                    source,
                },
            )?),
            None => None,
        };
        let (ready_tx, ready) = watch::channel(ReadySet::default());
        let pids = PidTable::default();
        let clock = *log.clock();
        let event_loop = EventLoop {
            log,
            clock,
            options,
            engine: ProbeEngine::new(clock),
            tx: tx.clone(),
            entries: HashMap::new(),
            ready_tx,
            pids: Arc::clone(&pids),
            _socket: socket,
        };
        let task = tokio::spawn(event_loop.run(rx));
        Ok(Self {
            tx,
            ready,
            pids,
            task: Some(task),
        })
    }

    pub async fn spawn(&self, spec: ContainerSpec) -> Result<(), SupervisorError> {
        spec.validate()?;
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Msg::Spawn(Box::new(spec), reply))
            .map_err(|_| SupervisorError::Stopped)?;
        rx.await.map_err(|_| SupervisorError::Stopped)?
    }

    pub fn ready_set(&self, service: &str) -> Vec<String> {
        self.ready.borrow().ready(service)
    }

    pub fn ready_watch(&self) -> watch::Receiver<ReadySet> {
        self.ready.clone()
    }

    pub async fn status(&self, id: &str) -> Option<ContainerStatus> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Msg::Status(id.to_string(), reply)).ok()?;
        rx.await.ok().flatten()
    }

    /// Kills every container and waits for the event loop to finish.
    pub async fn shutdown(mut self) {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(Msg::Shutdown(reply)).is_ok() {
            let _ = rx.await;
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        for pid in self.pids.lock().unwrap_or_else(|p| p.into_inner()).values() {
            kill_group(*pid, libc::SIGKILL);
        }
        if let Some(task) = &self.task {
            task.abort();
        }
    }
}

fn send_signal(pid: i32, signal: libc::c_int) -> bool {
    // SAFETY: plain syscall on a pid we spawned and have not yet reaped.
    unsafe { libc::kill(pid, signal) == 0 }
}

fn kill_group(pgid: i32, signal: libc::c_int) -> bool {
    // SAFETY: as above; children are spawned as their own process group leaders.
    unsafe { libc::killpg(pgid, signal) == 0 }
}

pub fn log_path(log_dir: &Path, container_id: &str, generation: u32) -> PathBuf {
    log_dir.join(format!("{container_id}.{generation}.log"))
}

fn describe_exit(status: &std::io::Result<ExitStatus>) -> String {
    match status {
        Ok(s) => match (s.code(), s.signal()) {
            (Some(code), _) => format!("exit_code={code}"),
            (None, Some(sig)) => format!("signal={sig}"),
            _ => "exit=unknown".into(),
        },
        Err(e) => format!("wait failed: {e}"),
    }
}

struct Entry {
    spec: ContainerSpec,
    status: ContainerStatus,
    generation: u32,
    in_ready_set: bool,
    pid: Option<i32>,
    started_tx: watch::Sender<bool>,
    probes: Option<ProbeScheduleHandle>,
    watcher: Option<JoinHandle<()>>,
    last_heartbeat: Duration,
    /// Restarts counted toward the crash-loop backoff.
    backoff_count: u32,
}

impl Entry {
    fn detach_monitors(&mut self) {
        self.probes = None;
        if let Some(w) = self.watcher.take() {
            w.abort();
        }
    }
}

struct EventLoop {
    log: Arc<EventLog>,
    clock: RunClock,
    options: SupervisorOptions,
    engine: ProbeEngine,
    tx: mpsc::UnboundedSender<Msg>,
    entries: HashMap<String, Entry>,
    ready_tx: watch::Sender<ReadySet>,
    pids: PidTable,
    _socket: Option<SocketListener>,
}

impl EventLoop {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Msg>) {
        let mut tick = tokio::time::interval(WATCHDOG_TICK);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            tokio::select! {
                msg = rx.recv() => {
                    let Some(msg) = msg else { break };
                    if let Msg::Shutdown(reply) = msg {
                        self.shutdown(&mut rx).await;
                        let _ = reply.send(());
                        break;
                    }
                    self.handle(msg);
                }
                _ = tick.tick() => self.check_watchdogs(),
            }
        }
        self.log.flush();
    }

    fn handle(&mut self, msg: Msg) {
        match msg {
            Msg::Spawn(spec, reply) => {
                let _ = reply.send(self.add(*spec));
            }
            Msg::Probe(record) => self.on_probe(record),
            Msg::Signal(signal) => self.on_signal(signal),
            Msg::LogWatch(LogWatchItem::Signal(signal)) => self.on_signal(signal),
            Msg::LogWatch(LogWatchItem::Degraded {
                container_id,
                reason,
            }) => {
                tracing::warn!(container = %container_id, "signal monitor degraded: {reason}");
                self.log.append(&Record::Monitor(MonitorNote {
                    timestamp: self.clock.now_ms(),
                    container_id,
                    detail: format!("degraded: {reason}"),
                }));
            }
            Msg::Exited {
                id,
                generation,
                status,
            } => self.on_exit(&id, generation, status),
            Msg::GraceExpired { id, generation } => self.on_grace_expired(&id, generation),
            Msg::BackoffDone { id, generation } => self.relaunch(&id, generation),
            Msg::Status(id, reply) => {
                let _ = reply.send(self.entries.get(&id).map(|e| e.status.clone()));
            }
            Msg::Shutdown(_) => unreachable!("handled in run"),
        }
    }

    fn now(&self) -> Duration {
        self.clock.elapsed()
    }

    fn add(&mut self, spec: ContainerSpec) -> Result<(), SupervisorError> {
        if self.entries.contains_key(&spec.container_id) {
            return Err(SupervisorError::DuplicateContainer(spec.container_id));
        }
        let id = spec.container_id.clone();
        let status = ContainerStatus::launched(&spec.probes, 0, self.now());
        let (started_tx, _) = watch::channel(status.started);
        self.entries.insert(
            id.clone(),
            Entry {
                spec,
                status,
                generation: 0,
                in_ready_set: false,
                pid: None,
                started_tx,
                probes: None,
                watcher: None,
                last_heartbeat: Duration::ZERO,
                backoff_count: 0,
            },
        );
        self.launch(&id);
        Ok(())
    }

    /// Starts the current generation's process and attaches its monitors.
    fn launch(&mut self, id: &str) {
        let now = self.now();
        let log_dir = self.options.log_dir.clone();
        let notify = self.options.notify_socket.clone();
        let tx = self.tx.clone();
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        let generation = entry.generation;
        entry.status =
            ContainerStatus::launched(&entry.spec.probes, entry.status.restart_count, now);
        entry.last_heartbeat = now;
        entry.in_ready_set = false;
        entry.started_tx = watch::channel(entry.status.started).0;

        let path = log_path(&log_dir, id, generation);
        let spawned = spawn_process(&entry.spec, &path, generation, notify.as_deref());
        match spawned {
            Ok(mut child) => {
                let pid = child.id().map(|p| p as i32);
                entry.pid = pid;
                if let Some(pid) = pid {
                    self.pids.lock().unwrap().insert(id.to_string(), pid);
                }
                let waiter_id = id.to_string();
                tokio::spawn(async move {
                    let status = child.wait().await;
                    let _ = tx.send(Msg::Exited {
                        id: waiter_id,
                        generation,
                        status,
                    });
                });
                self.log.lifecycle(
                    id,
                    LifecycleKind::Spawned,
                    format!("pid={} generation={generation}", pid.unwrap_or(-1)),
                );
                self.attach_monitors(id);
                let entry = &self.entries[id];
                if entry.status.started {
                    self.log
                        .lifecycle(id, LifecycleKind::Started, "no startup probe");
                }
            }
            Err(e) => {
                entry.pid = None;
                self.log
                    .lifecycle(id, LifecycleKind::Exited, format!("spawn failed: {e}"));
                let (status, action) = on_runtime_exit(&entry.status);
                entry.status = status;
                self.apply(id, action, "spawn failed");
            }
        }
    }

    fn attach_monitors(&mut self, id: &str) {
        let tx = self.tx.clone();
        let engine = self.engine.clone();
        let log_dir = self.options.log_dir.clone();
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        entry.detach_monitors();
        if !entry.spec.probes.is_empty() {
            let target = ProbeTarget {
                container_id: id.to_string(),
                generation: entry.generation,
                addr: entry.spec.addr,
                container_start: entry.status.container_start,
            };
            match engine.schedule(
                target,
                &entry.spec.probes,
                &entry.spec.policy,
                entry.started_tx.subscribe(),
                tx.clone(),
            ) {
                Ok(handle) => entry.probes = Some(handle),
                Err(e) => tracing::error!("cannot schedule probes for {id}: {e}"),
            }
        }
        if let Some(cfg) = &entry.spec.signal {
            if cfg.transport == Transport::LogTail {
                entry.watcher = Some(watch_logs(
                    id.to_string(),
                    log_path(&log_dir, id, entry.generation),
                    cfg.clone(),
                    cfg.monitor_start_delay,
                    tx,
                ));
            }
        }
    }

    fn on_probe(&mut self, record: ProbeOutcomeRecord) {
        let now = self.now();
        let Some(entry) = self.entries.get_mut(&record.container_id) else {
            return;
        };
        if record.generation != entry.generation {
            return;
        }
        self.log.append(&Record::Probe(record.clone()));
        match record_probe_result(
            &entry.status,
            record.kind,
            record.outcome,
            &entry.spec.probes,
            &entry.spec.policy,
            now,
        ) {
            Ok((status, action)) => {
                entry.status = status;
                let id = record.container_id;
                let cause = format!("{} probe failed", record.kind);
                self.apply(&id, action, &cause);
            }
            Err(StateError::ProbeGated(kind)) => {
                tracing::debug!(
                    "{kind} result for {} arrived before startup passed",
                    record.container_id
                );
            }
            Err(e) => tracing::error!("probe result for {} rejected: {e}", record.container_id),
        }
    }

    fn on_signal(&mut self, signal: Signal) {
        let now = self.now();
        let timestamp = self.clock.now_ms();
        let Some(entry) = self.entries.get_mut(&signal.container_id) else {
            tracing::warn!(
                "signal for unknown container {}; discarded",
                signal.container_id
            );
            return;
        };
        self.log.append(&Record::Signal(SignalRecord {
            timestamp,
            signal: signal.clone(),
        }));
        if entry.spec.policy.variant != PolicyVariant::SignalBased {
            return;
        }
        if signal.event == SignalEvent::Heartbeat {
            entry.last_heartbeat = now;
            return;
        }
        let action = dispatch(&signal, &entry.status);
        self.apply(
            &signal.container_id,
            action,
            &format!("{} signal", signal.event.as_str()),
        );
    }

    fn check_watchdogs(&mut self) {
        let now = self.now();
        let fired: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, e)| e.status.phase.is_live() && e.status.healthy)
            .filter(|(_, e)| {
                let deadline = e.spec.signal.as_ref().and_then(|s| s.heartbeat_deadline);
                watchdog_check(e.last_heartbeat, deadline, now) == Action::MarkUnhealthy
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in fired {
            self.log.append(&Record::Monitor(MonitorNote {
                timestamp: self.clock.now_ms(),
                container_id: id.clone(),
                detail: "heartbeat deadline exceeded".into(),
            }));
            self.apply(&id, Action::MarkUnhealthy, "heartbeat deadline exceeded");
        }
    }

    /// `cause` is recorded as the detail of an `unhealthy` event.
    fn apply(&mut self, id: &str, action: Action, cause: &str) {
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        let applied = apply_action(entry.status.clone(), entry.in_ready_set, action);
        entry.status = applied.status;
        if action == Action::MarkStarted {
            let _ = entry.started_tx.send(true);
        }
        if applied.in_ready_set != entry.in_ready_set {
            entry.in_ready_set = applied.in_ready_set;
            let (service, addr) = (entry.spec.service.clone(), entry.spec.addr);
            self.ready_tx.send_modify(|set| {
                set.set(&service, id, addr, applied.in_ready_set);
            });
        }
        let restart_number = entry.status.restart_count + 1;
        for event in applied.events {
            let detail = match event {
                LifecycleKind::RestartQueued => format!("restart_count={restart_number}"),
                LifecycleKind::Unhealthy => cause.to_string(),
                _ => String::new(),
            };
            self.log.lifecycle(id, event, detail);
        }
        if applied.queue_restart {
            self.begin_termination(id);
        }
    }

    fn begin_termination(&mut self, id: &str) {
        let tx = self.tx.clone();
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        entry.detach_monitors();
        match entry.pid {
            Some(pid) => {
                entry.status.phase = Phase::Terminating;
                // Polite stop goes to the main process only, like a container runtime.
                send_signal(pid, libc::SIGTERM);
                let grace = entry.spec.termination_grace_period;
                self.log.lifecycle(
                    id,
                    LifecycleKind::SigtermSent,
                    format!("grace_ms={}", grace.as_millis()),
                );
                let generation = entry.generation;
                let id = id.to_string();
                tokio::spawn(async move {
                    tokio::time::sleep(grace).await;
                    let _ = tx.send(Msg::GraceExpired { id, generation });
                });
            }
            None => self.begin_backoff(id),
        }
    }

    fn on_grace_expired(&mut self, id: &str, generation: u32) {
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        if entry.generation != generation || entry.status.phase != Phase::Terminating {
            return;
        }
        if let Some(pid) = entry.pid {
            kill_group(pid, libc::SIGKILL);
            self.log
                .lifecycle(id, LifecycleKind::SigkillSent, format!("pid={pid}"));
        }
    }

    fn on_exit(&mut self, id: &str, generation: u32, status: std::io::Result<ExitStatus>) {
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        if entry.generation != generation {
            return;
        }
        if let Some(pid) = entry.pid.take() {
            // Reap anything the main process left behind in its group.
            kill_group(pid, libc::SIGKILL);
            self.pids.lock().unwrap().remove(id);
        }
        self.log
            .lifecycle(id, LifecycleKind::Exited, describe_exit(&status));
        let entry = self.entries.get_mut(id).expect("entry checked above");
        match entry.status.phase {
            Phase::Initializing | Phase::Running => {
                let (next, action) = on_runtime_exit(&entry.status);
                entry.status = next;
                self.apply(id, action, "process exited");
            }
            Phase::Terminating => self.begin_backoff(id),
            _ => {}
        }
    }

    fn begin_backoff(&mut self, id: &str) {
        let now = self.now();
        let tx = self.tx.clone();
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        if now.saturating_sub(entry.status.container_start) >= entry.spec.backoff_reset_after {
            entry.backoff_count = 0;
        }
        entry.backoff_count += 1;
        entry.status.phase = Phase::BackoffWait;
        let delay = compute_backoff_delay(entry.backoff_count).expect("backoff count starts at 1");
        self.log.lifecycle(
            id,
            LifecycleKind::BackoffStarted,
            format!(
                "delay_ms={} backoff_count={}",
                delay.as_millis(),
                entry.backoff_count
            ),
        );
        let generation = entry.generation;
        let id = id.to_string();
        tokio::spawn(async move {
            tokio::time::sleep(delay).await;
            let _ = tx.send(Msg::BackoffDone { id, generation });
        });
    }

    fn relaunch(&mut self, id: &str, generation: u32) {
        let Some(entry) = self.entries.get_mut(id) else {
            return;
        };
        if entry.generation != generation || entry.status.phase != Phase::BackoffWait {
            return;
        }
        entry.generation += 1;
        entry.status.restart_count += 1;
        let detail = format!("restart_count={}", entry.status.restart_count);
        self.log.lifecycle(id, LifecycleKind::Restarted, detail);
        self.launch(id);
    }

    async fn shutdown(&mut self, rx: &mut mpsc::UnboundedReceiver<Msg>) {
        let mut live = 0usize;
        for entry in self.entries.values_mut() {
            entry.detach_monitors();
            if let Some(pid) = entry.pid {
                kill_group(pid, libc::SIGKILL);
                live += 1;
            }
            entry.status.phase = Phase::Exited;
        }
        self.ready_tx.send_replace(ReadySet::default());
        // Wait for the waiters to reap every killed process.
        let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
        while live > 0 {
            match tokio::time::timeout_at(deadline, rx.recv()).await {
                Ok(Some(Msg::Exited { id, generation, .. })) => {
                    if let Some(entry) = self.entries.get_mut(&id) {
                        if entry.generation == generation && entry.pid.take().is_some() {
                            live -= 1;
                        }
                    }
                }
                Ok(Some(_)) => {}
                Ok(None) | Err(_) => break,
            }
        }
        self.pids.lock().unwrap().clear();
    }
}

fn spawn_process(
    spec: &ContainerSpec,
    log_file: &Path,
    generation: u32,
    notify_socket: Option<&Path>,
) -> std::io::Result<tokio::process::Child> {
    let out = File::create(log_file)?;
    let err = out.try_clone()?;
    let (program, args) = spec.command.split_first().expect("validated non-empty");
    let mut cmd = tokio::process::Command::new(program);
    cmd.args(args)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0)
        .env("SENTINEL_CONTAINER_ID", &spec.container_id)
        .env("SENTINEL_GENERATION", generation.to_string());
    let wants_socket = spec
        .signal
        .as_ref()
        .is_some_and(|s| s.transport == Transport::Socket);
    if let (true, Some(socket)) = (wants_socket, notify_socket) {
        cmd.env("SENTINEL_NOTIFY_SOCKET", socket);
    }
    for (k, v) in &spec.env {
        cmd.env(k, v);
    }
    cmd.spawn()
}
