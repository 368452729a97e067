//! Run clock and duration helpers shared by every subsystem.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Monotonic clock anchored at the start of a run.
///
/// Event timestamps are milliseconds since the anchor. Signal frames carry
/// wall-clock milliseconds, so the clock also exposes `unix_ms`.
#[derive(Debug, Clone, Copy)]
pub struct RunClock {
    origin: Instant,
    wall_origin_ms: u64,
}

impl RunClock {
    pub fn start() -> Self {
        Self {
            origin: Instant::now(),
            wall_origin_ms: unix_ms(),
        }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }

    pub fn wall_origin_ms(&self) -> u64 {
        self.wall_origin_ms
    }

    pub fn elapsed(&self) -> Duration {
        self.origin.elapsed()
    }

    pub fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    pub fn at(&self, offset: Duration) -> Instant {
        self.origin + offset
    }

    pub fn offset_of(&self, instant: Instant) -> Duration {
        instant.saturating_duration_since(self.origin)
    }
}

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn ms(millis: u64) -> Duration {
    Duration::from_millis(millis)
}

pub fn secs_f64(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Serde adapter: `Duration` as fractional seconds.
pub mod serde_secs {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v)
            .map_err(|_| D::Error::custom(format!("invalid duration {v}s")))
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
            match d {
                Some(d) => s.serialize_some(&d.as_secs_f64()),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
            match Option::<f64>::deserialize(d)? {
                Some(v) => Duration::try_from_secs_f64(v)
                    .map(Some)
                    .map_err(|_| D::Error::custom(format!("invalid duration {v}s"))),
                None => Ok(None),
            }
        }
    }
}
