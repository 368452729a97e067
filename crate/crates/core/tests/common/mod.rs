#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use sentinel::config::RunConfig;
use sentinel::fault::{FaultEntry, FaultKind, FaultPlan};
use sentinel::harness::experiment::{run_experiment, RunOptions};
use sentinel::harness::metrics::{load_runs, RunEvents};

pub fn mock_binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_sentinel-mock"))
}

pub fn sentinel_binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_sentinel"))
}

pub fn preset(name: &str) -> RunConfig {
    RunConfig::from_toml(RunConfig::preset(name).expect("bundled preset")).expect("valid preset")
}

pub fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s)
}

pub fn fault(at: f64, target: &str, kind: FaultKind) -> FaultEntry {
    FaultEntry {
        at: secs(at),
        target: target.into(),
        kind,
        latency_ms: None,
        jitter: None,
    }
}

pub fn kill(at: f64, jitter: f64) -> FaultPlan {
    let mut f = fault(at, "catalogue-1", FaultKind::KillHandler);
    f.jitter = (jitter > 0.0).then(|| secs(jitter));
    FaultPlan { entries: vec![f] }
}

pub fn latency(at: f64, ms: u64) -> FaultEntry {
    let mut f = fault(at, "catalogue-1", FaultKind::Latency);
    f.latency_ms = Some(ms);
    f
}

/// Runs `cfg` into `dir` and returns the repetitions in order. Any aborted
/// repetition is an error.
pub async fn run(cfg: &RunConfig, dir: &Path) -> Result<Vec<RunEvents>, String> {
    let opts = RunOptions {
        rundir: dir.to_path_buf(),
        seed: 0,
        mock_binary: mock_binary(),
    };
    let name = &cfg.experiment.name;
    let report = run_experiment(cfg, &opts)
        .await
        .map_err(|e| format!("{name}: {e}"))?;
    if !report.aborted.is_empty() {
        return Err(format!("{name}: aborted repetitions {:?}", report.aborted));
    }
    Ok(load_runs(dir)
        .map_err(|e| format!("{name}: {e}"))?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Starts the mock service binary directly, outside any supervisor.
pub struct MockProcess {
    pub child: std::process::Child,
    pub addr: std::net::SocketAddr,
}

impl MockProcess {
    pub fn spawn(cfg: &sentinel::service::MockServiceConfig, env: &[(&str, &str)]) -> Self {
        let child = std::process::Command::new(mock_binary())
            .args(cfg.to_args())
            .envs(env.iter().copied())
            .stdout(std::process::Stdio::null())
            .spawn()
            .expect("spawn mock");
        Self {
            child,
            addr: cfg.listen,
        }
    }
}

impl Drop for MockProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn free_addr() -> std::net::SocketAddr {
    sentinel::net::loopback(sentinel::net::allocate_port().unwrap())
}

/// Status code of GET `path`, or None on connection failure or timeout.
pub async fn get_status(addr: std::net::SocketAddr, path: &str, timeout: Duration) -> Option<u16> {
    let client = sentinel::probe::http_client();
    let resp = tokio::time::timeout(timeout, client.get(format!("http://{addr}{path}")).send())
        .await
        .ok()?
        .ok()?;
    Some(resp.status().as_u16())
}

/// Polls until `f` holds or `limit` passes.
pub async fn wait_until<F, Fut>(limit: Duration, mut f: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let deadline = tokio::time::Instant::now() + limit;
    while tokio::time::Instant::now() < deadline {
        if f().await {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    false
}
