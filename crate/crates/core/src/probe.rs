//! Poll-based monitoring: schedules probes and executes HTTP, TCP and
//! command checks with timeouts.

use std::collections::HashSet;
use std::fmt;
use std::net::SocketAddr;
use std::ops::Range;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::{sleep_until, timeout, Instant};

use crate::state_machine::{
    first_probe_due, MonitoringPolicy, ProbeConfig, ProbeKind, ProbeMethod, ProbeOutcome, ProbeSet,
};
use crate::time::RunClock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Timeout,
    ConnectionRefused,
    BadStatus,
    CommandNonzero,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureReason::Timeout => "timeout",
            FailureReason::ConnectionRefused => "connection_refused",
            FailureReason::BadStatus => "bad_status",
            FailureReason::CommandNonzero => "command_nonzero",
        })
    }
}

pub type ProbeResult = Result<(), FailureReason>;

/// One executed probe. Timestamps are milliseconds since run start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcomeRecord {
    pub container_id: String,
    pub generation: u32,
    pub kind: ProbeKind,
    pub scheduled_at: u64,
    pub sent_at: u64,
    pub completed_at: u64,
    pub outcome: ProbeOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<FailureReason>,
}

impl ProbeOutcomeRecord {
    /// Probe latency, the time the check itself took.
    pub fn latency_ms(&self) -> u64 {
        self.completed_at.saturating_sub(self.sent_at)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("container {0} already has an active probe schedule")]
    DuplicateSchedule(String),
}

/// Default range of HTTP statuses counted as a passing probe.
pub const HTTP_SUCCESS: Range<u16> = 200..400;

pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .no_proxy()
        .pool_max_idle_per_host(0)
        .build()
        .expect("http client configuration is static")
}

fn classify_transport_error(err: &reqwest::Error) -> FailureReason {
    if err.is_timeout() {
        FailureReason::Timeout
    } else {
        // Refused, reset, or torn down mid-response: the endpoint is not serving.
        FailureReason::ConnectionRefused
    }
}

pub async fn execute_http_probe(
    client: &reqwest::Client,
    url: &str,
    limit: Duration,
    success: Range<u16>,
) -> ProbeResult {
    let request = async {
        let response = client.get(url).send().await?;
        let status = response.status().as_u16();
        // Drain the body so the connection is released.
        let _ = response.bytes().await;
        Ok::<u16, reqwest::Error>(status)
    };
    match timeout(limit, request).await {
        Err(_) => Err(FailureReason::Timeout),
        Ok(Err(e)) => Err(classify_transport_error(&e)),
        Ok(Ok(status)) if success.contains(&status) => Ok(()),
        Ok(Ok(_)) => Err(FailureReason::BadStatus),
    }
}

pub async fn execute_tcp_probe(addr: SocketAddr, limit: Duration) -> ProbeResult {
    match timeout(limit, TcpStream::connect(addr)).await {
        Err(_) => Err(FailureReason::Timeout),
        Ok(Err(e)) if e.kind() == std::io::ErrorKind::TimedOut => Err(FailureReason::Timeout),
        Ok(Err(_)) => Err(FailureReason::ConnectionRefused),
        Ok(Ok(_)) => Ok(()),
    }
}

pub async fn execute_command_probe(command: &[String], limit: Duration) -> ProbeResult {
    let Some((program, args)) = command.split_first() else {
        return Err(FailureReason::CommandNonzero);
    };
    let mut child = match tokio::process::Command::new(program)
        .args(args)
        .stdin(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .kill_on_drop(true)
        .spawn()
    {
        Ok(child) => child,
        Err(_) => return Err(FailureReason::CommandNonzero),
    };
    match timeout(limit, child.wait()).await {
        Ok(Ok(status)) if status.success() => Ok(()),
        Ok(_) => Err(FailureReason::CommandNonzero),
        Err(_) => {
            let _ = child.kill().await;
            Err(FailureReason::Timeout)
        }
    }
}

/// Everything needed to probe one container generation.
#[derive(Debug, Clone)]
pub struct ProbeTarget {
    pub container_id: String,
    pub generation: u32,
    pub addr: SocketAddr,
    /// Offset from run start at which this generation launched.
    pub container_start: Duration,
}

/// Runs probe schedules; one active schedule per container.
#[derive(Debug, Clone)]
pub struct ProbeEngine {
    clock: RunClock,
    client: reqwest::Client,
    http_success: Range<u16>,
    active: Arc<Mutex<HashSet<String>>>,
}

impl ProbeEngine {
    pub fn new(clock: RunClock) -> Self {
        Self {
            clock,
            client: http_client(),
            http_success: HTTP_SUCCESS,
            active: Arc::default(),
        }
    }

    pub fn with_http_success(mut self, range: Range<u16>) -> Self {
        self.http_success = range;
        self
    }

    /// Starts one periodic task per configured probe kind. Readiness and
    /// liveness wait for `started` when a startup probe is configured.
    pub fn schedule<T>(
        &self,
        target: ProbeTarget,
        probes: &ProbeSet,
        policy: &MonitoringPolicy,
        started: watch::Receiver<bool>,
        sink: mpsc::UnboundedSender<T>,
    ) -> Result<ProbeScheduleHandle, ProbeError>
    where
        T: From<ProbeOutcomeRecord> + Send + 'static,
    {
        {
            let mut active = self.active.lock().unwrap();
            if !active.insert(target.container_id.clone()) {
                return Err(ProbeError::DuplicateSchedule(target.container_id));
            }
        }
        let gated = probes.has(ProbeKind::Startup);
        let tasks = probes
            .iter()
            .map(|config| {
                let first_due =
                    self.clock
                        .at(first_probe_due(config, policy, target.container_start));
                let worker = ProbeWorker {
                    engine: self.clone(),
                    target: target.clone(),
                    config: config.clone(),
                    gated: gated && config.kind != ProbeKind::Startup,
                    started: started.clone(),
                };
                tokio::spawn(worker.run(Instant::from_std(first_due), sink.clone()))
            })
            .collect();
        Ok(ProbeScheduleHandle {
            container_id: target.container_id,
            tasks,
            active: Arc::clone(&self.active),
        })
    }

    async fn execute(&self, config: &ProbeConfig, addr: SocketAddr) -> ProbeResult {
        match &config.method {
            ProbeMethod::HttpGet { path } => {
                let url = format!("http://{addr}{path}");
                execute_http_probe(
                    &self.client,
                    &url,
                    config.timeout,
                    self.http_success.clone(),
                )
                .await
            }
            ProbeMethod::TcpConnect => execute_tcp_probe(addr, config.timeout).await,
            ProbeMethod::Command { command } => {
                execute_command_probe(command, config.timeout).await
            }
        }
    }
}

struct ProbeWorker {
    engine: ProbeEngine,
    target: ProbeTarget,
    config: ProbeConfig,
    gated: bool,
    started: watch::Receiver<bool>,
}

impl ProbeWorker {
    async fn run<T>(mut self, first_due: Instant, sink: mpsc::UnboundedSender<T>)
    where
        T: From<ProbeOutcomeRecord>,
    {
        let clock = self.engine.clock;
        let mut next = first_due;
        loop {
            sleep_until(next).await;
            let mut slot = next;
            if self.gated && !*self.started.borrow() {
                if self.started.wait_for(|s| *s).await.is_err() {
                    return;
                }
                // Probe as soon as startup passes, then rejoin the grid.
                slot = Instant::now();
            }
            if self.config.kind == ProbeKind::Startup && *self.started.borrow() {
                return;
            }
            let scheduled_at = clock.offset_of(slot.into_std()).as_millis() as u64;
            let sent_at = clock.now_ms();
            let result = self.engine.execute(&self.config, self.target.addr).await;
            let completed_at = clock.now_ms();
            let record = ProbeOutcomeRecord {
                container_id: self.target.container_id.clone(),
                generation: self.target.generation,
                kind: self.config.kind,
                scheduled_at,
                sent_at,
                completed_at,
                outcome: if result.is_ok() {
                    ProbeOutcome::Success
                } else {
                    ProbeOutcome::Failure
                },
                failure_reason: result.err(),
            };
            if sink.send(T::from(record)).is_err() {
                return;
            }
            // Fixed-rate schedule; a slot that is already past is skipped.
            next += self.config.interval;
            let now = Instant::now();
            while next <= now {
                tracing::debug!(
                    container = %self.target.container_id,
                    kind = %self.config.kind,
                    "probe still pending at its next slot; skipping"
                );
                next += self.config.interval;
            }
        }
    }
}

/// Cancels the schedule when dropped.
#[derive(Debug)]
pub struct ProbeScheduleHandle {
    container_id: String,
    tasks: Vec<JoinHandle<()>>,
    active: Arc<Mutex<HashSet<String>>>,
}

impl ProbeScheduleHandle {
    pub fn container_id(&self) -> &str {
        &self.container_id
    }

    pub fn cancel(self) {}
}

impl Drop for ProbeScheduleHandle {
    fn drop(&mut self) {
        for task in &self.tasks {
            task.abort();
        }
        self.active.lock().unwrap().remove(&self.container_id);
    }
}
