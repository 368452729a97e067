//! Predicted-versus-measured detection times for a set of repetitions.

use std::path::Path;

use super::metrics::{
    fmt_secs, measure_detection_times, summarize, Detection, ReplayError, RunEvents,
};
use super::LoadModel;
use crate::model;
use crate::probe::ProbeOutcomeRecord;
use crate::signal::{SignalEvent, Transport};
use crate::state_machine::{PolicyVariant, ProbeKind, ProbeOutcome};

pub const VALIDATION_HEADER: [&str; 4] = ["quantity", "predicted_s", "measured_s", "abs_error_s"];

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub quantity: String,
    pub predicted_s: Option<f64>,
    pub measured_s: Option<f64>,
}

impl ValidationRow {
    fn new(quantity: &str, predicted_s: Option<f64>, measured_s: Option<f64>) -> Self {
        Self {
            quantity: quantity.into(),
            predicted_s,
            measured_s,
        }
    }

    pub fn abs_error_s(&self) -> Option<f64> {
        Some((self.predicted_s? - self.measured_s?).abs())
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn latency_s(p: &ProbeOutcomeRecord) -> f64 {
    p.latency_ms() as f64 / 1000.0
}

/// Latency of the liveness probes that failed between injection and the
/// restart being queued: the probes that did the detecting.
pub fn detecting_probe_latencies(run: &RunEvents, d: &Detection) -> Vec<f64> {
    let Some(queue) = d.queue_s else {
        return vec![];
    };
    let until = d.injected_at + (queue * 1000.0).round() as u64;
    run.probes
        .iter()
        .filter(|p| p.container_id == d.container_id && p.kind == ProbeKind::Liveness)
        .filter(|p| p.outcome == ProbeOutcome::Failure)
        .filter(|p| p.sent_at >= d.injected_at && p.completed_at <= until)
        .map(latency_s)
        .collect()
}

fn signal_latencies(run: &RunEvents, event: SignalEvent) -> Vec<f64> {
    run.signals
        .iter()
        .filter(|s| s.signal.event == event)
        .map(|s| s.signal.latency_ms() as f64 / 1000.0)
        .collect()
}

/// Builds the validation report across completed repetitions.
pub fn validate_models(runs: &[RunEvents]) -> Vec<ValidationRow> {
    let runs: Vec<&RunEvents> = runs.iter().filter(|r| r.completed()).collect();
    let Some(first) = runs.first() else {
        return vec![];
    };
    let plan = &first.start.plan;
    let mut rows = vec![];

    let mut queue = vec![];
    let mut ready_after_restart = vec![];
    let mut ready = vec![];
    let mut detecting = vec![];
    let mut readiness_by_timeouts = vec![];
    for run in &runs {
        let detections = measure_detection_times(run);
        for d in &detections {
            queue.extend(d.queue_s);
            ready_after_restart.extend(d.ready_after_restart_s);
            ready.extend(d.ready_s);
            detecting.extend(detecting_probe_latencies(run, d));
        }
        if !detections.is_empty() {
            readiness_by_timeouts.push(summarize(run).readiness_detection_s);
        }
    }
    let mean_queue = mean(&queue);

    if plan.policy == PolicyVariant::SignalBased {
        let ls: Vec<f64> = runs
            .iter()
            .flat_map(|r| signal_latencies(r, SignalEvent::Unhealthy))
            .collect();
        if let (Some(ls), Some(_)) = (mean(&ls), mean_queue) {
            let predicted = model::predict_failure_scm(ls).ok();
            rows.push(ValidationRow::new(
                "failure_detection_scm",
                predicted,
                mean_queue,
            ));
        }
        let lr: Vec<f64> = runs
            .iter()
            .flat_map(|r| signal_latencies(r, SignalEvent::Ready))
            .collect();
        if let (Some(lr), Some(measured)) = (mean(&lr), mean(&ready_after_restart)) {
            let ts = match plan.signal_transport {
                Some(Transport::LogTail) => plan.monitor_start_delay_s.unwrap_or(0.0),
                _ => 0.0,
            };
            let predicted = model::predict_readiness_scm(plan.init_time_s, ts, lr).ok();
            rows.push(ValidationRow::new(
                "readiness_detection_scm",
                predicted,
                Some(measured),
            ));
        }
    } else {
        if let (Some(live), Some(measured)) = (&plan.liveness, mean_queue) {
            let n = live.failure_threshold;
            let i = live.interval_s;
            let ll = mean(&detecting);
            let predicted = ll.and_then(|l| model::predict_failure_pcm(n, i, l).ok());
            rows.push(ValidationRow::new(
                "failure_detection_pcm",
                predicted,
                Some(measured),
            ));
            let inferred = model::infer_probe_latency(measured, n, i).ok();
            rows.push(ValidationRow::new("liveness_probe_latency", inferred, ll));
        }
        if let (Some(readiness), Some(measured)) = (&plan.readiness, mean(&ready_after_restart)) {
            let tr = match plan.policy {
                PolicyVariant::DelayedProbes => readiness.initial_delay_s,
                _ => 0.0,
            };
            let lr: Vec<f64> = runs
                .iter()
                .flat_map(|r| r.probes.iter())
                .filter(|p| p.kind == ProbeKind::Readiness && p.outcome == ProbeOutcome::Success)
                .map(latency_s)
                .collect();
            let predicted = mean(&lr).and_then(|l| {
                model::predict_readiness_pcm(
                    plan.init_time_s,
                    tr,
                    readiness.success_threshold,
                    readiness.interval_s,
                    l,
                )
                .ok()
            });
            rows.push(ValidationRow::new(
                "readiness_detection_pcm",
                predicted,
                Some(measured),
            ));
        }
    }
    if plan.load_model == LoadModel::PacedUser {
        if let (Some(by_events), Some(by_timeouts)) = (mean(&ready), mean(&readiness_by_timeouts)) {
            rows.push(ValidationRow::new(
                "readiness_from_timeouts",
                Some(by_events),
                Some(by_timeouts),
            ));
        }
    }
    rows
}

pub fn write_validation_csv(path: &Path, rows: &[ValidationRow]) -> Result<(), ReplayError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(VALIDATION_HEADER)?;
    for row in rows {
        w.write_record([
            row.quantity.clone(),
            fmt_secs(row.predicted_s),
            fmt_secs(row.measured_s),
            fmt_secs(row.abs_error_s()),
        ])?;
    }
    w.flush().map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}
