//! Measurements recomputed from event logs: request counts, detection
//! times, availability, and the CSV artifacts built from them.

use std::collections::BTreeSet;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::{
    read_records, EventLogError, Record, RunEndRecord, RunStartRecord, RunStatus,
};
use crate::fault::{FaultKind, FaultOutcome, FaultRecord};
use crate::probe::ProbeOutcomeRecord;
use crate::service::RequestOutcome;
use crate::signal::SignalRecord;
use crate::supervisor::{LifecycleEvent, LifecycleKind};

pub const TIMESERIES_HEADER: [&str; 6] = [
    "second",
    "success",
    "timeout",
    "http500",
    "refused",
    "ready_instances",
];
pub const SUMMARY_HEADER: [&str; 15] = [
    "repetition",
    "status",
    "total",
    "success",
    "failed",
    "timeout",
    "http500",
    "refused",
    "time_to_queue_restart_s",
    "time_to_start_restart_s",
    "time_to_ready_s",
    "readiness_detection_s",
    "availability",
    "restarts",
    "excluded",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondCounts {
    pub success: u64,
    pub timeout: u64,
    pub http500: u64,
    pub refused: u64,
}

impl SecondCounts {
    pub fn add(&mut self, outcome: RequestOutcome) {
        match outcome {
            RequestOutcome::Success => self.success += 1,
            RequestOutcome::Timeout => self.timeout += 1,
            RequestOutcome::Http500 => self.http500 += 1,
            RequestOutcome::Refused => self.refused += 1,
        }
    }

    pub fn failed(&self) -> u64 {
        self.timeout + self.http500 + self.refused
    }

    pub fn total(&self) -> u64 {
        self.success + self.failed()
    }

    fn merge(&mut self, other: &SecondCounts) {
        self.success += other.success;
        self.timeout += other.timeout;
        self.http500 += other.http500;
        self.refused += other.refused;
    }
}

/// Per-second request counts as logged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub timestamp: u64,
    pub second: u64,
    pub success: u64,
    pub timeout: u64,
    pub http500: u64,
    pub refused: u64,
}

impl RequestCounts {
    pub fn new(timestamp: u64, second: u64, c: SecondCounts) -> Self {
        Self {
            timestamp,
            second,
            success: c.success,
            timeout: c.timeout,
            http500: c.http500,
            refused: c.refused,
        }
    }

    pub fn counts(&self) -> SecondCounts {
        SecondCounts {
            success: self.success,
            timeout: self.timeout,
            http500: self.http500,
            refused: self.refused,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] EventLogError),
    #[error("{path}: truncated event log, missing terminal events: {}", missing.join(", "))]
    MissingTerminal {
        path: PathBuf,
        missing: Vec<&'static str>,
    },
    #[error("{0}: no rep-*/events.ndjson found")]
    NoRuns(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot write CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// One repetition's event log, split by record type.
#[derive(Debug, Clone)]
pub struct RunEvents {
    pub path: PathBuf,
    pub start: RunStartRecord,
    pub load_start: Option<u64>,
    pub lifecycle: Vec<LifecycleEvent>,
    pub probes: Vec<ProbeOutcomeRecord>,
    pub signals: Vec<SignalRecord>,
    pub faults: Vec<FaultRecord>,
    pub metrics: Vec<RequestCounts>,
    pub end: RunEndRecord,
}

impl RunEvents {
    pub fn completed(&self) -> bool {
        self.end.status == RunStatus::Completed
    }

    pub fn window_s(&self) -> u64 {
        self.start.plan.window_s
    }

    /// Request counts per second of the window.
    pub fn seconds(&self) -> Vec<SecondCounts> {
        let mut out = vec![SecondCounts::default(); self.window_s() as usize];
        for m in &self.metrics {
            if let Some(slot) = out.get_mut(m.second as usize) {
                slot.merge(&m.counts());
            }
        }
        out
    }

    pub fn totals(&self) -> SecondCounts {
        let mut t = SecondCounts::default();
        for m in &self.metrics {
            t.merge(&m.counts());
        }
        t
    }
}

pub fn load_run(path: &Path) -> Result<RunEvents, ReplayError> {
    let records = read_records(path)?;
    let mut start = None;
    let mut end = None;
    let mut run = (None, vec![], vec![], vec![], vec![], vec![]);
    for record in records {
        match record {
            Record::RunStart(r) => start = Some(r),
            Record::LoadStart { timestamp } => run.0 = Some(timestamp),
            Record::Lifecycle(e) => run.1.push(e),
            Record::Probe(p) => run.2.push(p),
            Record::Signal(s) => run.3.push(s),
            Record::Fault(f) => run.4.push(f),
            Record::Metrics(m) => run.5.push(m),
            Record::Monitor(_) => {}
            Record::RunEnd(r) => end = Some(r),
        }
    }
    let mut missing = vec![];
    if start.is_none() {
        missing.push("run_start");
    }
    if end.is_none() {
        if run.0.is_none() {
            missing.push("load_start");
        }
        missing.push("run_end");
    }
    let (Some(start), Some(end)) = (start, end) else {
        return Err(ReplayError::MissingTerminal {
            path: path.to_path_buf(),
            missing,
        });
    };
    if end.status == RunStatus::Completed && run.0.is_none() {
        return Err(ReplayError::MissingTerminal {
            path: path.to_path_buf(),
            missing: vec!["load_start"],
        });
    }
    Ok(RunEvents {
        path: path.to_path_buf(),
        start,
        load_start: run.0,
        lifecycle: run.1,
        probes: run.2,
        signals: run.3,
        faults: run.4,
        metrics: run.5,
        end,
    })
}

/// Event logs of a run directory (`rep-*/events.ndjson`) or a single file.
pub fn load_runs(path: &Path) -> Result<Vec<(String, RunEvents)>, ReplayError> {
    if path.is_file() {
        return Ok(vec![(String::new(), load_run(path)?)]);
    }
    let entries = std::fs::read_dir(path).map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reps: Vec<String> = entries
        .filter_map(Result::ok)
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|name| name.starts_with("rep-") && path.join(name).join("events.ndjson").is_file())
        .collect();
    reps.sort();
    if reps.is_empty() {
        return Err(ReplayError::NoRuns(path.to_path_buf()));
    }
    reps.into_iter()
        .map(|rep| {
            let run = load_run(&path.join(&rep).join("events.ndjson"))?;
            Ok((rep, run))
        })
        .collect()
}

/// Detection times for one induced failure, in seconds after injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub fault_index: usize,
    pub container_id: String,
    pub injected_at: u64,
    pub queue_s: Option<f64>,
    pub restart_s: Option<f64>,
    pub ready_s: Option<f64>,
    /// Ready after the restart began.
    pub ready_after_restart_s: Option<f64>,
    pub sigterm_at: Option<u64>,
    pub sigkill_at: Option<u64>,
    /// Events that should exist for this failure but do not.
    pub gaps: Vec<&'static str>,
}

fn secs_between(from: u64, to: u64) -> f64 {
    (to as f64 - from as f64) / 1000.0
}

fn first_after<'a>(
    events: &'a [LifecycleEvent],
    id: &str,
    kind: LifecycleKind,
    after: u64,
) -> Option<&'a LifecycleEvent> {
    events
        .iter()
        .find(|e| e.container_id == id && e.event == kind && e.timestamp >= after)
}

/// One entry per applied kill-handler fault.
pub fn measure_detection_times(run: &RunEvents) -> Vec<Detection> {
    run.faults
        .iter()
        .filter(|f| f.kind == FaultKind::KillHandler && f.outcome == FaultOutcome::Applied)
        .map(|fault| {
            let id = fault.target.as_str();
            let t0 = fault.timestamp;
            let mut gaps = vec![];
            let queued = first_after(&run.lifecycle, id, LifecycleKind::RestartQueued, t0);
            if queued.is_none() {
                gaps.push("restart_queued");
            }
            let restarted = queued.and_then(|q| {
                first_after(&run.lifecycle, id, LifecycleKind::Restarted, q.timestamp)
            });
            if queued.is_some() && restarted.is_none() {
                gaps.push("restarted");
            }
            let ready = restarted
                .and_then(|r| first_after(&run.lifecycle, id, LifecycleKind::Ready, r.timestamp));
            if restarted.is_some() && ready.is_none() {
                gaps.push("ready");
            }
            let bound = restarted.map(|r| r.timestamp).unwrap_or(u64::MAX);
            let within = |kind| {
                queued
                    .and_then(|q| first_after(&run.lifecycle, id, kind, q.timestamp))
                    .filter(|e| e.timestamp <= bound)
                    .map(|e| e.timestamp)
            };
            Detection {
                fault_index: fault.index,
                container_id: id.to_string(),
                injected_at: t0,
                queue_s: queued.map(|e| secs_between(t0, e.timestamp)),
                restart_s: restarted.map(|e| secs_between(t0, e.timestamp)),
                ready_s: ready.map(|e| secs_between(t0, e.timestamp)),
                ready_after_restart_s: restarted
                    .zip(ready)
                    .map(|(r, e)| secs_between(r.timestamp, e.timestamp)),
                sigterm_at: within(LifecycleKind::SigtermSent),
                sigkill_at: within(LifecycleKind::SigkillSent),
                gaps,
            }
        })
        .collect()
}

/// Ready-instance counts sampled once per second from measurement start,
/// `window_s + 1` samples.
pub fn ready_samples(run: &RunEvents, window_s: u64) -> Vec<u32> {
    let Some(origin) = run.load_start else {
        return vec![0; window_s as usize + 1];
    };
    let mut events: Vec<&LifecycleEvent> = run.lifecycle.iter().collect();
    events.sort_by_key(|e| e.timestamp);
    let mut ready: BTreeSet<&str> = BTreeSet::new();
    let mut cursor = 0;
    (0..=window_s)
        .map(|k| {
            let t = origin + k * 1000;
            while cursor < events.len() && events[cursor].timestamp <= t {
                let e = events[cursor];
                match e.event {
                    LifecycleKind::Ready => {
                        ready.insert(&e.container_id);
                    }
                    LifecycleKind::Unready | LifecycleKind::Unhealthy | LifecycleKind::Exited => {
                        ready.remove(e.container_id.as_str());
                    }
                    _ => {}
                }
                cursor += 1;
            }
            ready.len() as u32
        })
        .collect()
}

/// Ready-instance-seconds over the window.
pub fn compute_availability(run: &RunEvents, window_s: u64) -> f64 {
    ready_samples(run, window_s)
        .iter()
        .map(|&n| f64::from(n))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepSummary {
    pub repetition: u32,
    pub status: RunStatus,
    pub counts: SecondCounts,
    pub time_to_queue_restart_s: Option<f64>,
    pub time_to_start_restart_s: Option<f64>,
    pub time_to_ready_s: Option<f64>,
    /// Timed-out requests times the request timeout.
    pub readiness_detection_s: f64,
    pub availability: f64,
    pub restarts: u64,
    pub excluded: String,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(run: &RunEvents) -> RepSummary {
    let detections = measure_detection_times(run);
    let counts = run.totals();
    let window = run.window_s();
    let window_end = run.load_start.map(|s| s + window * 1000);
    let restarts = match (run.load_start, window_end) {
        (Some(s), Some(e)) => run
            .lifecycle
            .iter()
            .filter(|l| l.event == LifecycleKind::Restarted && (s..=e).contains(&l.timestamp))
            .count() as u64,
        _ => 0,
    };
    RepSummary {
        repetition: run.start.repetition,
        status: run.end.status,
        counts,
        time_to_queue_restart_s: mean_of(detections.iter().map(|d| d.queue_s)),
        time_to_start_restart_s: mean_of(detections.iter().map(|d| d.restart_s)),
        time_to_ready_s: mean_of(detections.iter().map(|d| d.ready_s)),
        readiness_detection_s: counts.timeout as f64 * run.start.plan.request_timeout_s,
        availability: if run.completed() {
            compute_availability(run, window)
        } else {
            0.0
        },
        restarts,
        excluded: if run.completed() {
            String::new()
        } else {
            format!("aborted: {}", run.end.reason)
        },
    }
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_stddev(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

pub fn fmt_secs(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_default()
}

impl RepSummary {
    fn numeric(&self) -> [Option<f64>; 12] {
        let c = &self.counts;
        [
            Some(c.total() as f64),
            Some(c.success as f64),
            Some(c.failed() as f64),
            Some(c.timeout as f64),
            Some(c.http500 as f64),
            Some(c.refused as f64),
            self.time_to_queue_restart_s,
            self.time_to_start_restart_s,
            self.time_to_ready_s,
            Some(self.readiness_detection_s),
            Some(self.availability),
            Some(self.restarts as f64),
        ]
    }

    fn row(&self) -> Vec<String> {
        let c = &self.counts;
        let status = match self.status {
            RunStatus::Completed => "completed",
            RunStatus::Aborted => "aborted",
        };
        vec![
            self.repetition.to_string(),
            status.into(),
            c.total().to_string(),
            c.success.to_string(),
            c.failed().to_string(),
            c.timeout.to_string(),
            c.http500.to_string(),
            c.refused.to_string(),
            fmt_secs(self.time_to_queue_restart_s),
            fmt_secs(self.time_to_start_restart_s),
            fmt_secs(self.time_to_ready_s),
            format!("{:.3}", self.readiness_detection_s),
            format!("{:.3}", self.availability),
            self.restarts.to_string(),
            self.excluded.clone(),
        ]
    }
}

/// Writes one row per repetition plus `mean` and `stddev` footers over
/// the completed repetitions.
pub fn write_summary_csv(path: &Path, reps: &[RepSummary]) -> Result<(), ReplayError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for rep in reps {
        w.write_record(rep.row())?;
    }
    let completed: Vec<&RepSummary> = reps
        .iter()
        .filter(|r| r.status == RunStatus::Completed)
        .collect();
    let excluded = reps.len() - completed.len();
    let mut means = vec!["mean".to_string(), String::new()];
    let mut stds = vec!["stddev".to_string(), String::new()];
    for col in 0..12 {
        let xs: Vec<f64> = completed.iter().filter_map(|r| r.numeric()[col]).collect();
        let (m, s) = mean_stddev(&xs);
        means.push(fmt_secs(m));
        stds.push(fmt_secs(s));
    }
    let note = if excluded > 0 {
        format!("{excluded} repetition(s) excluded")
    } else {
        String::new()
    };
    means.push(note.clone());
    stds.push(note);
    w.write_record(means)?;
    w.write_record(stds)?;
    w.flush().map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

pub fn write_timeseries_csv(path: &Path, run: &RunEvents) -> Result<(), ReplayError> {
    let window = run.window_s();
    let seconds = run.seconds();
    let ready = ready_samples(run, window);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TIMESERIES_HEADER)?;
    for (s, c) in seconds.iter().enumerate() {
        w.write_record([
            s.to_string(),
            c.success.to_string(),
            c.timeout.to_string(),
            c.http500.to_string(),
            c.refused.to_string(),
            ready[s].to_string(),
        ])?;
    }
    w.flush().map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Writes `summary.csv`, `validation.csv` and per-repetition
/// `timeseries.csv` under `out`. Live runs and replays share this path.
pub fn write_artifacts(
    runs: &[(String, RunEvents)],
    out: &Path,
) -> Result<Vec<RepSummary>, ReplayError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReplayError::Io { path, source }
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut summaries = vec![];
    for (rep, run) in runs {
        let dir = out.join(rep);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_timeseries_csv(&dir.join("timeseries.csv"), run)?;
        summaries.push(summarize(run));
    }
    write_summary_csv(&out.join("summary.csv"), &summaries)?;
    let all: Vec<RunEvents> = runs.iter().map(|(_, r)| r.clone()).collect();
    let rows = super::validate::validate_models(&all);
    super::validate::write_validation_csv(&out.join("validation.csv"), &rows)?;
    Ok(summaries)
}
