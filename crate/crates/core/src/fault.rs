//! Scheduled fault injection: handler kill, `/health` latency, and
//! dependency outages.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::eventlog::{EventLog, Record};
use crate::service::{send_kill, DependencyStub};
use crate::time::serde_secs;

const KILL_TIMEOUT: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    KillHandler,
    /// Sets the extra `/health` latency; `latency_ms = 0` clears it.
    Latency,
    DependencyDown,
    DependencyUp,
}

impl FaultKind {
    pub fn targets_container(self) -> bool {
        matches!(self, FaultKind::KillHandler | FaultKind::Latency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    /// Offset from the start of the measurement window.
    #[serde(with = "serde_secs")]
    pub at: Duration,
    pub target: String,
    pub kind: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    /// Spreads the offset over `[at, at + jitter)` across repetitions.
    #[serde(
        with = "serde_secs::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub jitter: Option<Duration>,
}

#[derive(Debug, Error, PartialEq)]
pub enum FaultPlanError {
    #[error("fault {index}: unknown container target {target:?}")]
    UnknownContainer { index: usize, target: String },
    #[error("fault {index}: unknown dependency target {target:?}")]
    UnknownDependency { index: usize, target: String },
    #[error("fault {index}: latency fault needs latency_ms")]
    MissingLatency { index: usize },
    #[error("fault {index}: offsets must be sorted by `at`")]
    Unsorted { index: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultPlan {
    pub entries: Vec<FaultEntry>,
}

/// A plan entry with its offset fixed for one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedFault {
    pub index: usize,
    pub at: Duration,
    pub target: String,
    pub kind: FaultKind,
    pub latency_ms: Option<u64>,
}

impl FaultPlan {
    pub fn validate(
        &self,
        containers: &BTreeSet<String>,
        dependencies: &BTreeSet<String>,
    ) -> Result<(), FaultPlanError> {
        for (index, entry) in self.entries.iter().enumerate() {
            let target = entry.target.clone();
            if entry.kind.targets_container() {
                if !containers.contains(&entry.target) {
                    return Err(FaultPlanError::UnknownContainer { index, target });
                }
            } else if !dependencies.contains(&entry.target) {
                return Err(FaultPlanError::UnknownDependency { index, target });
            }
            if entry.kind == FaultKind::Latency && entry.latency_ms.is_none() {
                return Err(FaultPlanError::MissingLatency { index });
            }
            if index > 0 && entry.at < self.entries[index - 1].at {
                return Err(FaultPlanError::Unsorted { index });
            }
        }
        Ok(())
    }

    /// Offsets for repetition `rep` of `reps`. Jittered entries are
    /// stratified: repetition r lands in the r-th of `reps` equal slices of
    /// the jitter range, at a seeded position within it. Slices r and
    /// `reps - 1 - r` use mirrored positions, so with an even count the
    /// mean offset is exactly the middle of the range.
    pub fn resolve(&self, seed: u64, rep: u32, reps: u32) -> Vec<ResolvedFault> {
        let reps = reps.max(1);
        let rep = rep % reps;
        let mirror = reps - 1 - rep;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(rep.min(mirror)) << 32));
        let mut out: Vec<ResolvedFault> = self
            .entries
            .iter()
            .enumerate()
            .map(|(index, entry)| {
                let u: f64 = rng.random();
                let u = if rep > mirror { 1.0 - u } else { u };
                let shift = entry
                    .jitter
                    .map(|j| j.mul_f64((f64::from(rep) + u) / f64::from(reps)))
                    .unwrap_or(Duration::ZERO);
                ResolvedFault {
                    index,
                    at: entry.at + shift,
                    target: entry.target.clone(),
                    kind: entry.kind,
                    latency_ms: entry.latency_ms,
                }
            })
            .collect();
        out.sort_by_key(|f| (f.at, f.index));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultOutcome {
    Applied,
    /// Target was already down or unreachable.
    Noop,
}

/// An injection as written to the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub timestamp: u64,
    pub index: usize,
    pub target: String,
    pub kind: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    /// Planned offset from measurement start, ms.
    pub planned_offset: u64,
    pub outcome: FaultOutcome,
    #[serde(default)]
    pub detail: String,
}

/// Where faults land.
#[derive(Debug, Default)]
pub struct FaultTargets {
    pub containers: HashMap<String, ContainerTarget>,
    pub dependencies: Mutex<HashMap<String, DependencyStub>>,
}

#[derive(Debug, Clone)]
pub struct ContainerTarget {
    pub addr: SocketAddr,
    pub latency_file: PathBuf,
}

pub async fn apply_fault(fault: &ResolvedFault, targets: &FaultTargets) -> (FaultOutcome, String) {
    match fault.kind {
        FaultKind::KillHandler => {
            let Some(target) = targets.containers.get(&fault.target) else {
                return (FaultOutcome::Noop, "unknown container".into());
            };
            let addr = target.addr;
            let delivered = tokio::task::spawn_blocking(move || send_kill(addr, KILL_TIMEOUT))
                .await
                .unwrap_or(false);
            if delivered {
                (FaultOutcome::Applied, format!("kill sent to {addr}"))
            } else {
                (
                    FaultOutcome::Noop,
                    format!("handler at {addr} not reachable"),
                )
            }
        }
        FaultKind::Latency => {
            let Some(target) = targets.containers.get(&fault.target) else {
                return (FaultOutcome::Noop, "unknown container".into());
            };
            let ms = fault.latency_ms.unwrap_or(0);
            match tokio::fs::write(&target.latency_file, format!("{ms}\n")).await {
                Ok(()) => (FaultOutcome::Applied, format!("health latency {ms}ms")),
                Err(e) => (
                    FaultOutcome::Noop,
                    format!("cannot write latency file: {e}"),
                ),
            }
        }
        FaultKind::DependencyDown | FaultKind::DependencyUp => {
            let mut deps = targets.dependencies.lock().await;
            let Some(stub) = deps.get_mut(&fault.target) else {
                return (FaultOutcome::Noop, "unknown dependency".into());
            };
            if fault.kind == FaultKind::DependencyDown {
                if !stub.is_up() {
                    return (FaultOutcome::Noop, "already down".into());
                }
                stub.down();
                (FaultOutcome::Applied, format!("{} down", stub.addr()))
            } else {
                if stub.is_up() {
                    return (FaultOutcome::Noop, "already up".into());
                }
                match stub.up() {
                    Ok(()) => (FaultOutcome::Applied, format!("{} up", stub.addr())),
                    Err(e) => (FaultOutcome::Noop, format!("cannot rebind: {e}")),
                }
            }
        }
    }
}

/// Applies one fault now and logs it.
pub async fn inject(fault: &ResolvedFault, targets: &FaultTargets, log: &EventLog) -> FaultRecord {
    let timestamp = log.clock().now_ms();
    let (outcome, detail) = apply_fault(fault, targets).await;
    let record = FaultRecord {
        timestamp,
        index: fault.index,
        target: fault.target.clone(),
        kind: fault.kind,
        latency_ms: fault.latency_ms,
        planned_offset: fault.at.as_millis() as u64,
        outcome,
        detail,
    };
    log.append(&Record::Fault(record.clone()));
    record
}

/// Starts one timer task per fault, relative to `origin`.
pub fn run_plan(
    faults: Vec<ResolvedFault>,
    origin: Instant,
    targets: Arc<FaultTargets>,
    log: Arc<EventLog>,
) -> Vec<JoinHandle<FaultRecord>> {
    faults
        .into_iter()
        .map(|fault| {
            let targets = Arc::clone(&targets);
            let log = Arc::clone(&log);
            tokio::spawn(async move {
                tokio::time::sleep_until(origin + fault.at).await;
                inject(&fault, &targets, &log).await
            })
        })
        .collect()
}
