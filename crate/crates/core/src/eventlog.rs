//! The run's event log: newline-delimited JSON records, one file per
//! repetition. Every harness measurement is recomputed from this file.

use std::fs::File;
use std::io::{self, BufRead, BufReader, LineWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fault::FaultRecord;
use crate::harness::metrics::RequestCounts;
use crate::harness::ModelParams;
use crate::probe::ProbeOutcomeRecord;
use crate::signal::SignalRecord;
use crate::supervisor::{LifecycleEvent, LifecycleKind};
use crate::time::RunClock;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    RunStart(RunStartRecord),
    LoadStart { timestamp: u64 },
    Lifecycle(LifecycleEvent),
    Probe(ProbeOutcomeRecord),
    Signal(SignalRecord),
    Fault(FaultRecord),
    Metrics(RequestCounts),
    Monitor(MonitorNote),
    RunEnd(RunEndRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStartRecord {
    pub timestamp: u64,
    pub repetition: u32,
    pub wall_clock_ms: u64,
    pub plan: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEndRecord {
    pub timestamp: u64,
    pub status: RunStatus,
    #[serde(default)]
    pub reason: String,
}

/// Something the monitor wants on the record that is not a state change,
/// e.g. a log stream that went away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorNote {
    pub timestamp: u64,
    pub container_id: String,
    pub detail: String,
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("cannot open event log {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("event log {0} is empty")]
    Empty(PathBuf),
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("read error in {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
}

/// Append-only writer shared by every producer in a run.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    clock: RunClock,
    out: Mutex<LineWriter<File>>,
}

impl EventLog {
    pub fn create(path: impl Into<PathBuf>, clock: RunClock) -> Result<Self, EventLogError> {
        let path = path.into();
        let file = File::create(&path).map_err(|source| EventLogError::Open {
            path: path.clone(),
            source,
        })?;
        Ok(Self {
            path,
            clock,
            out: Mutex::new(LineWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn clock(&self) -> &RunClock {
        &self.clock
    }

    pub fn append(&self, record: &Record) {
        let line = match serde_json::to_string(record) {
            Ok(line) => line,
            Err(e) => {
                tracing::error!("cannot serialize event record: {e}");
                return;
            }
        };
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(out, "{line}") {
            tracing::error!("cannot write {}: {e}", self.path.display());
        }
    }

    pub fn lifecycle(&self, container_id: &str, event: LifecycleKind, detail: impl Into<String>) {
        self.append(&Record::Lifecycle(LifecycleEvent {
            timestamp: self.clock.now_ms(),
            container_id: container_id.to_string(),
            event,
            detail: detail.into(),
        }));
    }

    pub fn flush(&self) {
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        let _ = out.flush();
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, EventLogError> {
    let file = File::open(path).map_err(|source| EventLogError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EventLogError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| EventLogError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(EventLogError::Empty(path.to_path_buf()));
    }
    Ok(records)
}
