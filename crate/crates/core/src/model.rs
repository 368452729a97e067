//! Closed-form detection-time predictions for signal-based (SCM) and
//! poll-based (PCM) container monitoring.
//!
//! All durations are seconds as `f64`. Inputs are validated; a negative
//! duration or a non-positive probe interval is rejected rather than
//! silently producing a meaningless prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{name} must be a finite non-negative duration, got {value}")]
    NegativeDuration { name: &'static str, value: f64 },
    #[error("{name} must be a positive probe interval, got {value}")]
    NonPositiveInterval { name: &'static str, value: f64 },
    #[error("{name} must be at least 1, got {value}")]
    ZeroProbeCount { name: &'static str, value: u32 },
    #[error("measured time {measured}s is below the probe-interval floor {floor}s")]
    InfeasibleMeasurement { measured: f64, floor: f64 },
}

/// Every symbol the detection models consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionModelInput {
    /// Signal latency, emission to receipt.
    pub signal_latency: f64,
    pub liveness_probe_latency: f64,
    pub readiness_probe_latency: f64,
    pub liveness_interval: f64,
    pub readiness_interval: f64,
    /// Consecutive liveness failures required to mark a container Unhealthy.
    pub liveness_probes_required: u32,
    /// Consecutive readiness successes required to mark a container Ready.
    pub readiness_probes_required: u32,
    /// Time for a restarted container to become able to serve.
    pub container_ready_time: f64,
    /// Time until the first readiness probe runs.
    pub first_probe_time: f64,
    /// Time until signal monitoring of a restarted container begins.
    pub monitor_start_time: f64,
}

impl DetectionModelInput {
    pub fn validate(&self) -> Result<(), ModelError> {
        non_negative("signal_latency", self.signal_latency)?;
        non_negative("liveness_probe_latency", self.liveness_probe_latency)?;
        non_negative("readiness_probe_latency", self.readiness_probe_latency)?;
        non_negative("container_ready_time", self.container_ready_time)?;
        non_negative("first_probe_time", self.first_probe_time)?;
        non_negative("monitor_start_time", self.monitor_start_time)?;
        positive_interval("liveness_interval", self.liveness_interval)?;
        positive_interval("readiness_interval", self.readiness_interval)?;
        at_least_one("liveness_probes_required", self.liveness_probes_required)?;
        at_least_one("readiness_probes_required", self.readiness_probes_required)?;
        Ok(())
    }

    pub fn failure_scm(&self) -> Result<f64, ModelError> {
        predict_failure_scm(self.signal_latency)
    }

    pub fn failure_pcm(&self) -> Result<f64, ModelError> {
        predict_failure_pcm(
            self.liveness_probes_required,
            self.liveness_interval,
            self.liveness_probe_latency,
        )
    }

    pub fn readiness_scm(&self) -> Result<f64, ModelError> {
        predict_readiness_scm(
            self.container_ready_time,
            self.monitor_start_time,
            self.signal_latency,
        )
    }

    pub fn readiness_pcm(&self) -> Result<f64, ModelError> {
        predict_readiness_pcm(
            self.container_ready_time,
            self.first_probe_time,
            self.readiness_probes_required,
            self.readiness_interval,
            self.readiness_probe_latency,
        )
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(ModelError::NegativeDuration { name, value })
    }
}

fn positive_interval(name: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ModelError::NonPositiveInterval { name, value })
    }
}

fn at_least_one(name: &'static str, value: u32) -> Result<u32, ModelError> {
    if value >= 1 {
        Ok(value)
    } else {
        Err(ModelError::ZeroProbeCount { name, value })
    }
}

/// Mean time for SCM to detect a failure: the signal latency alone.
pub fn predict_failure_scm(signal_latency: f64) -> Result<f64, ModelError> {
    non_negative("signal_latency", signal_latency)
}

/// Mean time for PCM to detect a failure, `(N - 1/2) * I + L`.
///
/// The half interval is the expected wait from a uniformly placed failure
/// to the next probe; the remaining `N - 1` probes must all fail too.
pub fn predict_failure_pcm(
    probes_required: u32,
    interval: f64,
    probe_latency: f64,
) -> Result<f64, ModelError> {
    at_least_one("probes_required", probes_required)?;
    positive_interval("interval", interval)?;
    non_negative("probe_latency", probe_latency)?;
    Ok((probes_required as f64 - 0.5) * interval + probe_latency)
}

/// Mean time for SCM to detect readiness, `max(T_c, T_s) + L_s`.
pub fn predict_readiness_scm(
    container_ready_time: f64,
    monitor_start_time: f64,
    signal_latency: f64,
) -> Result<f64, ModelError> {
    non_negative("container_ready_time", container_ready_time)?;
    non_negative("monitor_start_time", monitor_start_time)?;
    non_negative("signal_latency", signal_latency)?;
    Ok(container_ready_time.max(monitor_start_time) + signal_latency)
}

/// Mean time for PCM to detect readiness.
///
/// When the container is ready strictly before the first readiness probe,
/// detection needs that probe plus `N - 1` more. Otherwise (including
/// `T_c == T_r`) the failure-detection reasoning applies from `T_c`.
pub fn predict_readiness_pcm(
    container_ready_time: f64,
    first_probe_time: f64,
    probes_required: u32,
    interval: f64,
    probe_latency: f64,
) -> Result<f64, ModelError> {
    non_negative("container_ready_time", container_ready_time)?;
    non_negative("first_probe_time", first_probe_time)?;
    at_least_one("probes_required", probes_required)?;
    positive_interval("interval", interval)?;
    non_negative("probe_latency", probe_latency)?;
    let n = probes_required as f64;
    if container_ready_time < first_probe_time {
        Ok(first_probe_time + (n - 1.0) * interval + probe_latency)
    } else {
        Ok(container_ready_time + (n - 0.5) * interval + probe_latency)
    }
}

/// Inverts [`predict_failure_pcm`] to recover the probe latency from a
/// measured mean detection time.
pub fn infer_probe_latency(
    measured: f64,
    probes_required: u32,
    interval: f64,
) -> Result<f64, ModelError> {
    non_negative("measured", measured)?;
    at_least_one("probes_required", probes_required)?;
    positive_interval("interval", interval)?;
    let floor = (probes_required as f64 - 0.5) * interval;
    // Millisecond resolution: anything within half a millisecond of the floor
    // is treated as zero latency rather than infeasible.
    if measured + 5e-4 < floor {
        return Err(ModelError::InfeasibleMeasurement { measured, floor });
    }
    Ok((measured - floor).max(0.0))
}
