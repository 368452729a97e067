//! HTTP load generation against a balancer.

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::sync::mpsc;
use tokio::time::{sleep_until, Instant};

use super::metrics::SecondCounts;
use super::LoadModel;
use crate::service::{Balancer, RequestOutcome};

/// An arrival this late means the generator is not keeping up.
pub const MAX_LATENESS: Duration = Duration::from_millis(500);

#[derive(Debug, Error, PartialEq)]
pub enum LoadError {
    #[error("load generator fell {lateness_ms}ms behind schedule at second {second}; rate not sustainable")]
    Overload { second: u64, lateness_ms: u64 },
}

#[derive(Debug, Clone)]
pub struct LoadProfile {
    pub rate: f64,
    pub window: Duration,
    pub model: LoadModel,
    pub path: String,
}

/// Drives load from `start` for `profile.window` and returns per-second
/// outcome counts, keyed by the second in which each request was sent.
pub async fn generate_load(
    balancer: Arc<Balancer>,
    profile: &LoadProfile,
    start: Instant,
) -> Result<Vec<SecondCounts>, LoadError> {
    let seconds = profile.window.as_secs().max(1) as usize;
    let mut counts = vec![SecondCounts::default(); seconds];
    let gap = Duration::from_secs_f64(1.0 / profile.rate);
    let end = start + profile.window;
    match profile.model {
        LoadModel::OpenLoop => {
            let (tx, mut rx) = mpsc::unbounded_channel::<(usize, RequestOutcome)>();
            let total = (profile.rate * profile.window.as_secs_f64()).round() as u64;
            for i in 0..total {
                let slot = start + gap.mul_f64(i as f64);
                sleep_until(slot).await;
                let lateness = Instant::now().saturating_duration_since(slot);
                let second = slot.duration_since(start).as_secs() as usize;
                if lateness > MAX_LATENESS {
                    return Err(LoadError::Overload {
                        second: second as u64,
                        lateness_ms: lateness.as_millis() as u64,
                    });
                }
                let lb = Arc::clone(&balancer);
                let tx = tx.clone();
                let path = profile.path.clone();
                tokio::spawn(async move {
                    let outcome = lb.forward(&path).await;
                    let _ = tx.send((second, outcome));
                });
            }
            drop(tx);
            while let Some((second, outcome)) = rx.recv().await {
                counts[second.min(seconds - 1)].add(outcome);
            }
        }
        LoadModel::PacedUser => {
            let mut slot = start;
            while slot < end {
                sleep_until(slot).await;
                let sent = Instant::now();
                let second = sent.duration_since(start).as_secs() as usize;
                let outcome = balancer.forward(&profile.path).await;
                counts[second.min(seconds - 1)].add(outcome);
                slot = (slot + gap).max(Instant::now());
            }
        }
    }
    Ok(counts)
}
