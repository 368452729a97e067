//! Run configuration files and bundled presets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fault::FaultPlan;
use crate::harness::ExperimentPlan;
use crate::signal::{valid_container_id, SignalMonitorConfig};
use crate::state_machine::{MonitoringPolicy, PolicyVariant, ProbeConfig, ProbeSet};
use crate::supervisor::{RunMode, DEFAULT_BACKOFF_RESET, MIN_GRACE_PERIOD};
use crate::time::serde_secs;

/// Bundled configurations, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("dp", include_str!("../presets/dp.toml")),
    ("fp-readiness", include_str!("../presets/fp-readiness.toml")),
    ("fp-liveness", include_str!("../presets/fp-liveness.toml")),
    ("ski", include_str!("../presets/ski.toml")),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(
        "{0} is neither a config file nor a preset (presets: dp, fp-readiness, fp-liveness, ski)"
    )]
    NotFound(String),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_grace() -> Duration {
    Duration::from_secs(30)
}

fn default_backoff_reset() -> Duration {
    DEFAULT_BACKOFF_RESET
}

fn default_ready_line() -> String {
    "serving on".into()
}

fn default_unhealthy_line() -> String {
    "handler exited".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub name: String,
    #[serde(with = "serde_secs", default)]
    pub init_time: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependency: Option<String>,
    #[serde(default = "default_ready_line")]
    pub ready_log_line: String,
    #[serde(default = "default_unhealthy_line")]
    pub unhealthy_log_line: String,
    #[serde(default)]
    pub response_latency_ms: u64,
    #[serde(default)]
    pub run_mode: RunMode,
    #[serde(default)]
    pub http500_window_ms: u64,
    #[serde(
        with = "serde_secs::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub heartbeat_interval: Option<Duration>,
    /// Run this instead of the mock service. The port to listen on is in
    /// `SENTINEL_PORT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerConfig {
    pub id: String,
    pub service: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitoringBlock {
    pub policy: PolicyVariant,
    #[serde(
        with = "serde_secs::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub tolerate_window: Option<Duration>,
    #[serde(with = "serde_secs", default = "default_grace")]
    pub termination_grace_period: Duration,
    #[serde(with = "serde_secs", default = "default_backoff_reset")]
    pub backoff_reset_after: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<SignalMonitorConfig>,
    #[serde(default)]
    pub probes: Vec<ProbeConfig>,
}

impl MonitoringBlock {
    pub fn policy(&self) -> MonitoringPolicy {
        MonitoringPolicy {
            variant: self.policy,
            tolerate_window: self.tolerate_window,
        }
    }

    pub fn probe_set(&self) -> Result<ProbeSet, ConfigError> {
        ProbeSet::new(self.probes.iter().cloned()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn validate(&self, name: &str) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid(format!("monitoring.{name}: {m}"));
        self.policy().validate().map_err(|e| bad(e.to_string()))?;
        self.probe_set().map_err(|e| bad(e.to_string()))?;
        if self.termination_grace_period < MIN_GRACE_PERIOD {
            return Err(bad("termination_grace_period must be at least 2s".into()));
        }
        match (&self.signal, self.policy == PolicyVariant::SignalBased) {
            (Some(s), true) => s.validate().map_err(bad),
            (None, false) => Ok(()),
            (Some(_), false) => Err(bad("signal block requires policy signal_based".into())),
            (None, true) => Err(bad("policy signal_based requires a signal block".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rundir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_binary: Option<PathBuf>,
    #[serde(default)]
    pub dependencies: Vec<String>,
    pub experiment: ExperimentPlan,
    pub services: Vec<ServiceConfig>,
    pub containers: Vec<ContainerConfig>,
    pub monitoring: BTreeMap<String, MonitoringBlock>,
    #[serde(default)]
    pub faults: FaultPlan,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn preset(name: &str) -> Option<&'static str> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| *text)
    }

    /// Loads a config file, or a bundled preset when `arg` names one and is
    /// not an existing path.
    pub fn load(arg: &str) -> Result<Self, ConfigError> {
        let path = Path::new(arg);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            return Self::from_toml(&text);
        }
        match Self::preset(arg) {
            Some(text) => Self::from_toml(text),
            None => Err(ConfigError::NotFound(arg.to_string())),
        }
    }

    pub fn selected_monitoring(&self) -> &MonitoringBlock {
        &self.monitoring[&self.experiment.monitoring]
    }

    /// The service that receives load: the first one listed.
    pub fn load_target(&self) -> &ServiceConfig {
        &self.services[0]
    }

    pub fn service(&self, name: &str) -> Option<&ServiceConfig> {
        self.services.iter().find(|s| s.name == name)
    }

    /// Switches to the unscaled timings: experiment durations from
    /// `experiment.paper_scale` and probe delays from `paper_initial_delay`.
    pub fn apply_paper_scale(&mut self) {
        if let Some(scale) = &self.experiment.paper_scale {
            self.experiment.warmup = scale.warmup;
            self.experiment.window = scale.window;
            self.experiment.repetitions = scale.repetitions;
        }
        for block in self.monitoring.values_mut() {
            for probe in &mut block.probes {
                if let Some(delay) = probe.paper_initial_delay {
                    probe.initial_delay = delay;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid(m);
        self.experiment
            .validate()
            .map_err(|m| bad(format!("experiment: {m}")))?;
        if !self.monitoring.contains_key(&self.experiment.monitoring) {
            return Err(bad(format!(
                "experiment.monitoring names unknown block {:?}",
                self.experiment.monitoring
            )));
        }
        for (name, block) in &self.monitoring {
            block.validate(name)?;
        }
        if self.services.is_empty() {
            return Err(bad("at least one service is required".into()));
        }
        let deps: BTreeSet<String> = self.dependencies.iter().cloned().collect();
        if deps.len() != self.dependencies.len() {
            return Err(bad("duplicate dependency name".into()));
        }
        let mut service_names = BTreeSet::new();
        for s in &self.services {
            if !service_names.insert(s.name.as_str()) {
                return Err(bad(format!("duplicate service {:?}", s.name)));
            }
            if let Some(dep) = &s.dependency {
                if !deps.contains(dep) {
                    return Err(bad(format!(
                        "service {:?} depends on unknown dependency {dep:?}",
                        s.name
                    )));
                }
            }
            if s.command.as_ref().is_some_and(Vec::is_empty) {
                return Err(bad(format!("service {:?} has an empty command", s.name)));
            }
        }
        if self.containers.is_empty() {
            return Err(bad("at least one container is required".into()));
        }
        let mut ids = BTreeSet::new();
        for c in &self.containers {
            if !valid_container_id(&c.id) {
                return Err(bad(format!(
                    "container id {:?} must match [A-Za-z0-9._-]{{1,64}}",
                    c.id
                )));
            }
            if !ids.insert(c.id.clone()) {
                return Err(bad(format!("duplicate container id {:?}", c.id)));
            }
            if !service_names.contains(c.service.as_str()) {
                return Err(bad(format!(
                    "container {:?} references unknown service {:?}",
                    c.id, c.service
                )));
            }
        }
        if !self
            .containers
            .iter()
            .any(|c| c.service == self.load_target().name)
        {
            return Err(bad(format!(
                "no container runs the load target service {:?}",
                self.load_target().name
            )));
        }
        self.faults
            .validate(&ids, &deps)
            .map_err(|e| bad(e.to_string()))?;
        Ok(())
    }
}
