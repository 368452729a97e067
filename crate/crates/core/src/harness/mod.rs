//! Experiment harness: load generation, repetition orchestration, and
//! measurement from event logs.

pub mod experiment;
pub mod load;
pub mod metrics;
pub mod validate;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::service::UnavailableMode;
use crate::signal::Transport;
use crate::state_machine::{PolicyVariant, ProbeConfig};
use crate::time::serde_secs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadModel {
    /// Fixed-rate arrivals regardless of outstanding requests.
    #[default]
    OpenLoop,
    /// One user issuing requests back to back at most `request_rate` per
    /// second; a timed-out request delays the next one.
    PacedUser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Wait until every container is ready, then warm up, then measure.
    #[default]
    AfterReady,
    /// Start measuring as the containers are spawned.
    Immediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperScale {
    #[serde(with = "serde_secs")]
    pub warmup: Duration,
    #[serde(with = "serde_secs")]
    pub window: Duration,
    pub repetitions: u32,
}

fn default_rate() -> f64 {
    100.0
}

fn default_request_timeout() -> Duration {
    Duration::from_millis(500)
}

fn default_warmup() -> Duration {
    Duration::from_secs(10)
}

fn default_window() -> Duration {
    Duration::from_secs(120)
}

fn default_repetitions() -> u32 {
    5
}

fn default_ready_timeout() -> Duration {
    Duration::from_secs(120)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    /// Key of the monitoring block in force.
    pub monitoring: String,
    #[serde(default = "default_rate")]
    pub request_rate: f64,
    #[serde(with = "serde_secs", default = "default_request_timeout")]
    pub request_timeout: Duration,
    #[serde(with = "serde_secs", default = "default_warmup")]
    pub warmup: Duration,
    #[serde(with = "serde_secs", default = "default_window")]
    pub window: Duration,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub load_model: LoadModel,
    #[serde(default)]
    pub unavailable: UnavailableMode,
    #[serde(default)]
    pub start: StartMode,
    #[serde(with = "serde_secs", default = "default_ready_timeout")]
    pub ready_timeout: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_scale: Option<PaperScale>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.request_rate > 0.0 && self.request_rate.is_finite()) {
            return Err(format!(
                "request_rate must be positive, got {}",
                self.request_rate
            ));
        }
        if self.request_timeout.is_zero() {
            return Err("request_timeout must be positive".into());
        }
        if self.window < Duration::from_secs(1) {
            return Err("window must be at least 1s".into());
        }
        if self.request_timeout >= self.window {
            return Err("request_timeout must be shorter than the window".into());
        }
        if self.repetitions == 0 {
            return Err("repetitions must be at least 1".into());
        }
        Ok(())
    }

    pub fn window_secs(&self) -> u64 {
        self.window.as_secs()
    }
}

/// Probe parameters needed by the detection-time models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub interval_s: f64,
    pub initial_delay_s: f64,
    pub failure_threshold: u32,
    pub success_threshold: u32,
    pub timeout_s: f64,
}

impl From<&ProbeConfig> for ProbeParams {
    fn from(c: &ProbeConfig) -> Self {
        Self {
            interval_s: c.interval.as_secs_f64(),
            initial_delay_s: c.initial_delay.as_secs_f64(),
            failure_threshold: c.failure_threshold,
            success_threshold: c.success_threshold,
            timeout_s: c.timeout.as_secs_f64(),
        }
    }
}

/// Snapshot of the run parameters stored in each repetition's event log,
/// so that measurements can be recomputed from the log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub experiment: String,
    pub monitoring: String,
    pub policy: PolicyVariant,
    pub window_s: u64,
    pub request_timeout_s: f64,
    pub request_rate: f64,
    #[serde(default)]
    pub load_model: LoadModel,
    pub repetitions: u32,
    pub containers: u32,
    /// Configured service init time.
    pub init_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub startup: Option<ProbeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readiness: Option<ProbeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub liveness: Option<ProbeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_transport: Option<Transport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor_start_delay_s: Option<f64>,
}
