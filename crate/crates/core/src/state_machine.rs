//! Per-container monitoring state machine.
//!
//! Everything here is a pure transition on an immutable [`ContainerStatus`].
//! Callers (probe engine, signal engine, supervisor) serialize updates per
//! container and apply the returned [`Action`].

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::serde_secs;

/// Lower bound on any probe interval.
pub const MIN_PROBE_INTERVAL: Duration = Duration::from_secs(1);
/// Upper bound on the crash-loop backoff.
pub const MAX_BACKOFF: Duration = Duration::from_secs(300);
const BASE_BACKOFF: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("no {0} probe is configured for this container")]
    UnconfiguredProbe(ProbeKind),
    #[error("{0} probe result received before the startup probe passed")]
    ProbeGated(ProbeKind),
    #[error("duplicate {0} probe; at most one probe of each kind is allowed")]
    DuplicateProbe(ProbeKind),
    #[error("invalid {kind} probe: {reason}")]
    InvalidProbe { kind: ProbeKind, reason: String },
    #[error("invalid monitoring policy: {0}")]
    InvalidPolicy(String),
    #[error("restart count must be at least 1, got {0}")]
    InvalidRestartCount(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Startup,
    Readiness,
    Liveness,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [
        ProbeKind::Startup,
        ProbeKind::Readiness,
        ProbeKind::Liveness,
    ];

    fn index(self) -> usize {
        match self {
            ProbeKind::Startup => 0,
            ProbeKind::Readiness => 1,
            ProbeKind::Liveness => 2,
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::Startup => "startup",
            ProbeKind::Readiness => "readiness",
            ProbeKind::Liveness => "liveness",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ProbeMethod {
    HttpGet {
        #[serde(default = "default_probe_path")]
        path: String,
    },
    TcpConnect,
    Command {
        command: Vec<String>,
    },
}

fn default_probe_path() -> String {
    "/health".to_string()
}

fn default_timeout() -> Duration {
    Duration::from_millis(500)
}

fn one() -> u32 {
    1
}

fn three() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    #[serde(flatten)]
    pub method: ProbeMethod,
    #[serde(with = "serde_secs")]
    pub interval: Duration,
    #[serde(with = "serde_secs", default)]
    pub initial_delay: Duration,
    /// Initial delay used with `--paper-scale`; falls back to `initial_delay`.
    #[serde(
        with = "serde_secs::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub paper_initial_delay: Option<Duration>,
    #[serde(with = "serde_secs", default = "default_timeout")]
    pub timeout: Duration,
    #[serde(default = "three")]
    pub failure_threshold: u32,
    #[serde(default = "one")]
    pub success_threshold: u32,
}

impl ProbeConfig {
    pub fn http(kind: ProbeKind, interval: Duration) -> Self {
        Self {
            kind,
            method: ProbeMethod::HttpGet {
                path: default_probe_path(),
            },
            interval,
            initial_delay: Duration::ZERO,
            paper_initial_delay: None,
            timeout: default_timeout(),
            failure_threshold: 3,
            success_threshold: 1,
        }
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let bad = |reason: String| StateError::InvalidProbe {
            kind: self.kind,
            reason,
        };
        if self.interval < MIN_PROBE_INTERVAL {
            return Err(bad(format!(
                "interval {:?} is below the 1s minimum",
                self.interval
            )));
        }
        if self.timeout.is_zero() || self.timeout >= self.interval {
            return Err(bad(format!(
                "timeout {:?} must be positive and shorter than interval {:?}",
                self.timeout, self.interval
            )));
        }
        if self.failure_threshold == 0 || self.success_threshold == 0 {
            return Err(bad("thresholds must be at least 1".into()));
        }
        if self.kind == ProbeKind::Liveness && self.success_threshold != 1 {
            return Err(bad("liveness success_threshold must be 1".into()));
        }
        if let ProbeMethod::Command { command } = &self.method {
            if command.is_empty() {
                return Err(bad("command probe needs a program".into()));
            }
        }
        Ok(())
    }
}

/// The probes configured for one container, at most one per kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeSet {
    slots: [Option<ProbeConfig>; 3],
}

impl ProbeSet {
    pub fn new(configs: impl IntoIterator<Item = ProbeConfig>) -> Result<Self, StateError> {
        let mut set = ProbeSet::default();
        for config in configs {
            config.validate()?;
            let slot = &mut set.slots[config.kind.index()];
            if slot.is_some() {
                return Err(StateError::DuplicateProbe(config.kind));
            }
            *slot = Some(config);
        }
        Ok(set)
    }

    pub fn get(&self, kind: ProbeKind) -> Option<&ProbeConfig> {
        self.slots[kind.index()].as_ref()
    }

    pub fn has(&self, kind: ProbeKind) -> bool {
        self.get(kind).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProbeConfig> {
        self.slots.iter().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Probing begins after each probe's initial delay; readiness and
    /// liveness are distinct.
    DelayedProbes,
    /// Probing begins immediately, any probe drives both traffic and
    /// restarts, and restarts are suppressed for a window after start.
    TolerateFailures,
    /// Probing begins immediately and any probe drives both traffic and
    /// restarts.
    Conflated,
    /// Failure is detected from container signals; probes never restart.
    SignalBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitoringPolicy {
    pub variant: PolicyVariant,
    #[serde(
        with = "serde_secs::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub tolerate_window: Option<Duration>,
}

impl MonitoringPolicy {
    pub const fn delayed_probes() -> Self {
        Self {
            variant: PolicyVariant::DelayedProbes,
            tolerate_window: None,
        }
    }

    pub const fn conflated() -> Self {
        Self {
            variant: PolicyVariant::Conflated,
            tolerate_window: None,
        }
    }

    pub const fn signal_based() -> Self {
        Self {
            variant: PolicyVariant::SignalBased,
            tolerate_window: None,
        }
    }

    pub const fn tolerate_failures(window: Duration) -> Self {
        Self {
            variant: PolicyVariant::TolerateFailures,
            tolerate_window: Some(window),
        }
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let has_window = self.tolerate_window.is_some_and(|w| !w.is_zero());
        match (self.variant, has_window) {
            (PolicyVariant::TolerateFailures, false) => Err(StateError::InvalidPolicy(
                "tolerate_failures needs a positive tolerate_window".into(),
            )),
            (PolicyVariant::TolerateFailures, true) => Ok(()),
            (_, true) => Err(StateError::InvalidPolicy(
                "tolerate_window is only valid with tolerate_failures".into(),
            )),
            (_, false) => Ok(()),
        }
    }

    fn conflates_probe_kinds(&self) -> bool {
        matches!(
            self.variant,
            PolicyVariant::Conflated | PolicyVariant::TolerateFailures
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initializing,
    Running,
    Terminating,
    RestartQueued,
    BackoffWait,
    Exited,
}

impl Phase {
    /// A restart is pending in any of these phases.
    pub fn restart_pending(self) -> bool {
        matches!(
            self,
            Phase::Terminating | Phase::RestartQueued | Phase::BackoffWait
        )
    }

    pub fn is_live(self) -> bool {
        matches!(self, Phase::Initializing | Phase::Running)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCounters {
    pub consecutive_failures: u32,
    pub consecutive_successes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    None,
    MarkStarted,
    MarkReady,
    MarkUnready,
    MarkUnhealthy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerStatus {
    pub started: bool,
    pub ready: bool,
    pub healthy: bool,
    pub restart_count: u32,
    pub phase: Phase,
    pub counters: [ProbeCounters; 3],
    /// Offset from run start at which this generation was launched.
    pub container_start: Duration,
    /// Set once the tolerate window has expired and the counters were reset.
    pub tolerate_window_elapsed: bool,
}

impl ContainerStatus {
    /// Fresh status for a newly launched generation. Without a startup
    /// probe the container counts as started immediately.
    pub fn launched(probes: &ProbeSet, restart_count: u32, container_start: Duration) -> Self {
        let started = !probes.has(ProbeKind::Startup);
        Self {
            started,
            ready: false,
            healthy: true,
            restart_count,
            phase: if started {
                Phase::Running
            } else {
                Phase::Initializing
            },
            counters: [ProbeCounters::default(); 3],
            container_start,
            tolerate_window_elapsed: false,
        }
    }

    pub fn counters(&self, kind: ProbeKind) -> ProbeCounters {
        self.counters[kind.index()]
    }
}

/// Applies one probe result to the container status.
pub fn record_probe_result(
    status: &ContainerStatus,
    kind: ProbeKind,
    outcome: ProbeOutcome,
    probes: &ProbeSet,
    policy: &MonitoringPolicy,
    now: Duration,
) -> Result<(ContainerStatus, Action), StateError> {
    let config = probes
        .get(kind)
        .ok_or(StateError::UnconfiguredProbe(kind))?;
    let mut next = status.clone();

    if !status.phase.is_live() {
        return Ok((next, Action::None));
    }
    if kind == ProbeKind::Startup && status.started {
        return Ok((next, Action::None));
    }
    if kind != ProbeKind::Startup && !status.started {
        return Err(StateError::ProbeGated(kind));
    }

    let within_tolerate_window = match (policy.variant, policy.tolerate_window) {
        (PolicyVariant::TolerateFailures, Some(window)) => {
            let expired = now >= status.container_start + window;
            if expired && !next.tolerate_window_elapsed {
                next.tolerate_window_elapsed = true;
                next.counters = [ProbeCounters::default(); 3];
            }
            !expired
        }
        _ => false,
    };

    let counters = &mut next.counters[kind.index()];
    match outcome {
        ProbeOutcome::Success => {
            counters.consecutive_successes = counters.consecutive_successes.saturating_add(1);
            counters.consecutive_failures = 0;
        }
        ProbeOutcome::Failure => {
            counters.consecutive_failures = counters.consecutive_failures.saturating_add(1);
            counters.consecutive_successes = 0;
        }
    }
    let counters = *counters;
    let success_reached = outcome == ProbeOutcome::Success
        && counters.consecutive_successes >= config.success_threshold;
    let failure_reached = outcome == ProbeOutcome::Failure
        && counters.consecutive_failures >= config.failure_threshold;

    let action = match kind {
        ProbeKind::Startup => {
            if success_reached {
                next.started = true;
                next.phase = Phase::Running;
                Action::MarkStarted
            } else if failure_reached {
                unhealthy(&mut next, policy, within_tolerate_window)
            } else {
                Action::None
            }
        }
        ProbeKind::Readiness | ProbeKind::Liveness => {
            let drives_traffic = kind == ProbeKind::Readiness || policy.conflates_probe_kinds();
            let drives_restart = kind == ProbeKind::Liveness || policy.conflates_probe_kinds();
            if success_reached && drives_traffic && !next.ready {
                next.ready = true;
                Action::MarkReady
            } else if failure_reached && drives_restart {
                unhealthy(&mut next, policy, within_tolerate_window)
            } else if failure_reached && drives_traffic && next.ready {
                next.ready = false;
                Action::MarkUnready
            } else {
                Action::None
            }
        }
    };
    Ok((next, action))
}

fn unhealthy(next: &mut ContainerStatus, policy: &MonitoringPolicy, suppressed: bool) -> Action {
    if policy.variant == PolicyVariant::SignalBased {
        return Action::None;
    }
    if suppressed {
        // Restart withheld; the container still stops taking traffic.
        if next.ready {
            next.ready = false;
            return Action::MarkUnready;
        }
        return Action::None;
    }
    if !next.healthy {
        return Action::None;
    }
    next.healthy = false;
    next.ready = false;
    Action::MarkUnhealthy
}

/// The container runtime reported the process exited on its own.
pub fn on_runtime_exit(status: &ContainerStatus) -> (ContainerStatus, Action) {
    let mut next = status.clone();
    if !status.phase.is_live() {
        return (next, Action::None);
    }
    next.healthy = false;
    next.ready = false;
    next.phase = Phase::Exited;
    (next, Action::MarkUnhealthy)
}

/// Crash-loop delay before the `restart_count`-th restart: none for the
/// first two, then 10s doubling per restart, capped at 300s.
pub fn compute_backoff_delay(restart_count: u32) -> Result<Duration, StateError> {
    match restart_count {
        0 => Err(StateError::InvalidRestartCount(0)),
        1 | 2 => Ok(Duration::ZERO),
        n => {
            let doublings = n - 3;
            // 10s * 2^5 = 320s already exceeds the cap.
            if doublings >= 5 {
                Ok(MAX_BACKOFF)
            } else {
                Ok((BASE_BACKOFF * (1u32 << doublings)).min(MAX_BACKOFF))
            }
        }
    }
}

/// When the first probe of `config` is due for a container launched at
/// `container_start`.
pub fn first_probe_due(
    config: &ProbeConfig,
    policy: &MonitoringPolicy,
    container_start: Duration,
) -> Duration {
    match policy.variant {
        PolicyVariant::DelayedProbes | PolicyVariant::SignalBased => {
            container_start + config.initial_delay
        }
        PolicyVariant::TolerateFailures | PolicyVariant::Conflated => container_start,
    }
}
