//! Signal-based monitoring: containers announce READY / UNHEALTHY /
//! HEARTBEAT either by writing matching log lines or by sending frames on
//! a local stream socket.
//!
//! Socket frames are UTF-8 lines of the form
//!
//! ```text
//! v1 <container_id> <READY|UNHEALTHY|HEARTBEAT> <unix_millis>\n
//! ```
//!
//! where `container_id` matches `[A-Za-z0-9._-]{1,64}`.

use std::fmt;
use std::io::SeekFrom;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncSeekExt, BufReader};
use tokio::net::{UnixListener, UnixStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::state_machine::{Action, ContainerStatus};
use crate::time::{serde_secs, unix_ms};

pub const FRAME_VERSION: &str = "v1";
const MAX_FRAME_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SignalEvent {
    Ready,
    Unhealthy,
    Heartbeat,
}

impl SignalEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalEvent::Ready => "READY",
            SignalEvent::Unhealthy => "UNHEALTHY",
            SignalEvent::Heartbeat => "HEARTBEAT",
        }
    }
}

impl fmt::Display for SignalEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignalEvent {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "READY" => Ok(SignalEvent::Ready),
            "UNHEALTHY" => Ok(SignalEvent::Unhealthy),
            "HEARTBEAT" => Ok(SignalEvent::Heartbeat),
            other => Err(FrameError::UnknownEvent(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    LogTail,
    Socket,
}

/// A state-change announcement from a container. Times are unix millis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub container_id: String,
    pub event: SignalEvent,
    pub emitted_at: u64,
    pub received_at: u64,
    pub transport: Transport,
}

impl Signal {
    /// Realized signal latency.
    pub fn latency_ms(&self) -> u64 {
        self.received_at.saturating_sub(self.emitted_at)
    }
}

/// A signal as written to the event log, stamped with run time as well.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub timestamp: u64,
    #[serde(flatten)]
    pub signal: Signal,
}

fn default_poll_gap() -> Duration {
    Duration::from_millis(20)
}

fn default_monitor_start_delay() -> Duration {
    Duration::from_millis(2_800)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalMonitorConfig {
    pub ready_pattern: String,
    pub unhealthy_pattern: String,
    pub transport: Transport,
    #[serde(
        with = "serde_secs::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub heartbeat_deadline: Option<Duration>,
    #[serde(with = "serde_secs", default = "default_poll_gap")]
    pub log_poll_gap: Duration,
    /// Delay after each (re)launch before the log watcher attaches.
    #[serde(with = "serde_secs", default = "default_monitor_start_delay")]
    pub monitor_start_delay: Duration,
}

impl SignalMonitorConfig {
    pub fn new(ready_pattern: &str, unhealthy_pattern: &str, transport: Transport) -> Self {
        Self {
            ready_pattern: ready_pattern.into(),
            unhealthy_pattern: unhealthy_pattern.into(),
            transport,
            heartbeat_deadline: None,
            log_poll_gap: default_poll_gap(),
            monitor_start_delay: default_monitor_start_delay(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.ready_pattern.is_empty() || self.unhealthy_pattern.is_empty() {
            return Err("signal patterns must be non-empty".into());
        }
        if self.ready_pattern == self.unhealthy_pattern {
            return Err("ready and unhealthy patterns must differ".into());
        }
        if self.log_poll_gap.is_zero() {
            return Err("log_poll_gap must be positive".into());
        }
        Ok(())
    }

    /// Literal substring match; UNHEALTHY wins when a line carries both.
    pub fn classify_line(&self, line: &str) -> Option<SignalEvent> {
        if line.contains(&self.unhealthy_pattern) {
            Some(SignalEvent::Unhealthy)
        } else if line.contains(&self.ready_pattern) {
            Some(SignalEvent::Ready)
        } else {
            None
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame is not valid UTF-8")]
    NotUtf8,
    #[error("frame is missing its trailing newline")]
    Unterminated,
    #[error("frame longer than {MAX_FRAME_LEN} bytes")]
    TooLong,
    #[error("expected 4 space-separated fields, got {0}")]
    FieldCount(usize),
    #[error("unsupported frame version {0:?}")]
    Version(String),
    #[error("invalid container id {0:?}")]
    ContainerId(String),
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("invalid timestamp {0:?}")]
    Timestamp(String),
}

pub fn valid_container_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

pub fn format_frame(container_id: &str, event: SignalEvent, unix_millis: u64) -> String {
    format!("{FRAME_VERSION} {container_id} {event} {unix_millis}\n")
}

/// Parses one complete frame, including its trailing `\n`.
pub fn parse_frame(frame: &[u8], received_at: u64) -> Result<Signal, FrameError> {
    if frame.len() > MAX_FRAME_LEN {
        return Err(FrameError::TooLong);
    }
    let body = frame.strip_suffix(b"\n").ok_or(FrameError::Unterminated)?;
    let text = std::str::from_utf8(body).map_err(|_| FrameError::NotUtf8)?;
    let fields: Vec<&str> = text.split(' ').collect();
    let [version, id, event, millis] = fields[..] else {
        return Err(FrameError::FieldCount(fields.len()));
    };
    if version != FRAME_VERSION {
        return Err(FrameError::Version(version.to_string()));
    }
    if !valid_container_id(id) {
        return Err(FrameError::ContainerId(id.to_string()));
    }
    let event: SignalEvent = event.parse()?;
    if millis.is_empty() || !millis.bytes().all(|b| b.is_ascii_digit()) {
        return Err(FrameError::Timestamp(millis.to_string()));
    }
    let emitted_at = millis
        .parse::<u64>()
        .map_err(|_| FrameError::Timestamp(millis.to_string()))?;
    Ok(Signal {
        container_id: id.to_string(),
        event,
        emitted_at,
        received_at,
        transport: Transport::Socket,
    })
}

/// Counters for the socket transport.
#[derive(Debug, Default)]
pub struct SocketStats {
    pub accepted_frames: AtomicU64,
    pub parse_errors: AtomicU64,
}

/// Accepts signal frames on a local stream socket.
#[derive(Debug)]
pub struct SocketListener {
    path: PathBuf,
    stats: Arc<SocketStats>,
    task: JoinHandle<()>,
}

impl SocketListener {
    pub fn bind<T>(
        path: impl Into<PathBuf>,
        sink: mpsc::UnboundedSender<T>,
    ) -> std::io::Result<Self>
    where
        T: From<Signal> + Send + 'static,
    {
        let path = path.into();
        let _ = std::fs::remove_file(&path);
        let listener = UnixListener::bind(&path)?;
        let stats = Arc::new(SocketStats::default());
        let task = tokio::spawn(accept_loop(listener, sink, Arc::clone(&stats)));
        Ok(Self { path, stats, task })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn stats(&self) -> &SocketStats {
        &self.stats
    }

    pub fn parse_errors(&self) -> u64 {
        self.stats.parse_errors.load(Ordering::Relaxed)
    }
}

impl Drop for SocketListener {
    fn drop(&mut self) {
        self.task.abort();
        let _ = std::fs::remove_file(&self.path);
    }
}

async fn accept_loop<T>(
    listener: UnixListener,
    sink: mpsc::UnboundedSender<T>,
    stats: Arc<SocketStats>,
) where
    T: From<Signal> + Send + 'static,
{
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                tokio::spawn(read_frames(stream, sink.clone(), Arc::clone(&stats)));
            }
            Err(e) => {
                tracing::warn!("signal socket accept failed: {e}");
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
        }
    }
}

async fn read_frames<T>(stream: UnixStream, sink: mpsc::UnboundedSender<T>, stats: Arc<SocketStats>)
where
    T: From<Signal>,
{
    let mut reader = BufReader::new(stream);
    let mut frame = Vec::with_capacity(64);
    loop {
        frame.clear();
        // Bound each read so a peer cannot grow the buffer without limit.
        let mut limited = (&mut reader).take(MAX_FRAME_LEN as u64 + 1);
        match limited.read_until(b'\n', &mut frame).await {
            Ok(0) => return,
            Ok(_) => {}
            Err(e) => {
                tracing::debug!("signal connection closed: {e}");
                return;
            }
        }
        match parse_frame(&frame, unix_ms()) {
            Ok(signal) => {
                stats.accepted_frames.fetch_add(1, Ordering::Relaxed);
                if sink.send(T::from(signal)).is_err() {
                    return;
                }
            }
            Err(e) => {
                stats.parse_errors.fetch_add(1, Ordering::Relaxed);
                tracing::warn!("dropping malformed signal frame: {e}");
                if e == FrameError::TooLong {
                    // Resynchronise on the next newline.
                    let mut discard = Vec::new();
                    if reader.read_until(b'\n', &mut discard).await.unwrap_or(0) == 0 {
                        return;
                    }
                }
            }
        }
    }
}

/// Sends one frame to a signal socket. Used by the mock service.
pub fn send_frame_blocking(
    socket: &Path,
    container_id: &str,
    event: SignalEvent,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut stream = std::os::unix::net::UnixStream::connect(socket)?;
    stream.write_all(format_frame(container_id, event, unix_ms()).as_bytes())
}

/// Item produced by a log watcher.
#[derive(Debug, Clone, PartialEq)]
pub enum LogWatchItem {
    Signal(Signal),
    /// The log stream went away; no signal is inferred from this.
    Degraded {
        container_id: String,
        reason: String,
    },
}

/// Leading `<unix_millis> ` stamp written by the mock service, if present.
fn line_timestamp(line: &str) -> Option<u64> {
    let (head, _) = line.split_once(' ')?;
    if head.len() >= 12 && head.bytes().all(|b| b.is_ascii_digit()) {
        head.parse().ok()
    } else {
        None
    }
}

/// Tails one log generation file and emits signals for matching lines.
///
/// The watcher starts reading from the beginning of `path` after
/// `start_delay`; earlier generations are separate files and are never
/// replayed.
pub fn watch_logs<T>(
    container_id: String,
    path: PathBuf,
    config: SignalMonitorConfig,
    start_delay: Duration,
    sink: mpsc::UnboundedSender<T>,
) -> JoinHandle<()>
where
    T: From<LogWatchItem> + Send + 'static,
{
    tokio::spawn(async move {
        tokio::time::sleep(start_delay).await;
        let mut file = loop {
            match tokio::fs::File::open(&path).await {
                Ok(f) => break f,
                Err(_) => tokio::time::sleep(config.log_poll_gap).await,
            }
        };
        let mut offset = 0u64;
        let mut pending = Vec::<u8>::new();
        let mut chunk = vec![0u8; 8192];
        loop {
            match file.read(&mut chunk).await {
                Ok(0) => {
                    if tokio::fs::metadata(&path).await.is_err() {
                        let _ = sink.send(T::from(LogWatchItem::Degraded {
                            container_id: container_id.clone(),
                            reason: format!("log file {} disappeared", path.display()),
                        }));
                        return;
                    }
                    tokio::time::sleep(config.log_poll_gap).await;
                    // Re-seek so a truncated-and-rewritten file is not missed.
                    if let Err(e) = file.seek(SeekFrom::Start(offset)).await {
                        let _ = sink.send(T::from(LogWatchItem::Degraded {
                            container_id: container_id.clone(),
                            reason: format!("seek failed: {e}"),
                        }));
                        return;
                    }
                }
                Ok(n) => {
                    offset += n as u64;
                    pending.extend_from_slice(&chunk[..n]);
                    while let Some(pos) = pending.iter().position(|b| *b == b'\n') {
                        let line: Vec<u8> = pending.drain(..=pos).collect();
                        let line = String::from_utf8_lossy(&line[..line.len() - 1]);
                        if let Some(event) = config.classify_line(&line) {
                            let received_at = unix_ms();
                            let signal = Signal {
                                container_id: container_id.clone(),
                                event,
                                emitted_at: line_timestamp(&line)
                                    .unwrap_or(received_at)
                                    .min(received_at),
                                received_at,
                                transport: Transport::LogTail,
                            };
                            if sink.send(T::from(LogWatchItem::Signal(signal))).is_err() {
                                return;
                            }
                        }
                    }
                }
                Err(e) => {
                    let _ = sink.send(T::from(LogWatchItem::Degraded {
                        container_id: container_id.clone(),
                        reason: format!("read failed: {e}"),
                    }));
                    return;
                }
            }
        }
    })
}

/// Decides what a received signal means for the container.
pub fn dispatch(signal: &Signal, status: &ContainerStatus) -> Action {
    if !status.phase.is_live() {
        return Action::None;
    }
    match signal.event {
        SignalEvent::Ready if status.started && !status.ready => Action::MarkReady,
        SignalEvent::Unhealthy if status.healthy => Action::MarkUnhealthy,
        _ => Action::None,
    }
}

/// Heartbeat watchdog. Times are offsets on one clock.
pub fn watchdog_check(
    last_heartbeat: Duration,
    deadline: Option<Duration>,
    now: Duration,
) -> Action {
    match deadline {
        Some(deadline) if now.saturating_sub(last_heartbeat) > deadline => Action::MarkUnhealthy,
        _ => Action::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_machine::{Phase, ProbeSet};
    use std::io::Write;

    #[test]
    fn frame_grammar() {
        let s = parse_frame(b"v1 cat-1 READY 1700000000000\n", 1700000000050).unwrap();
        assert_eq!(s.container_id, "cat-1");
        assert_eq!(s.event, SignalEvent::Ready);
        assert_eq!(s.latency_ms(), 50);
        assert_eq!(s.transport, Transport::Socket);

        assert_eq!(
            parse_frame(b"v1 cat-1 BOGUS 0\n", 0),
            Err(FrameError::UnknownEvent("BOGUS".into()))
        );
        assert_eq!(
            parse_frame(b"v1 cat-1 READY 1", 0),
            Err(FrameError::Unterminated)
        );
        assert!(matches!(
            parse_frame(b"v2 cat-1 READY 1\n", 0),
            Err(FrameError::Version(_))
        ));
        assert!(matches!(
            parse_frame(b"v1 cat 1 READY 1\n", 0),
            Err(FrameError::FieldCount(5))
        ));
        assert!(matches!(
            parse_frame(b"v1 cat/1 READY 1\n", 0),
            Err(FrameError::ContainerId(_))
        ));
        assert!(matches!(
            parse_frame(b"v1 c READY -1\n", 0),
            Err(FrameError::Timestamp(_))
        ));
        assert!(matches!(
            parse_frame(b"v1 c READY 1\r\n", 0),
            Err(FrameError::Timestamp(_))
        ));
        let long_id = "a".repeat(65);
        assert!(matches!(
            parse_frame(format!("v1 {long_id} READY 1\n").as_bytes(), 0),
            Err(FrameError::ContainerId(_))
        ));
        assert_eq!(
            parse_frame(b"v1 \xff READY 1\n", 0),
            Err(FrameError::NotUtf8)
        );
    }

    #[test]
    fn line_classification() {
        let cfg = SignalMonitorConfig::new("serving on", "handler exited", Transport::LogTail);
        assert_eq!(
            cfg.classify_line("serving on :8080"),
            Some(SignalEvent::Ready)
        );
        assert_eq!(cfg.classify_line("unrelated"), None);
        assert_eq!(
            cfg.classify_line("serving on :8080 then handler exited"),
            Some(SignalEvent::Unhealthy)
        );
        assert!(SignalMonitorConfig::new("x", "x", Transport::Socket)
            .validate()
            .is_err());
        assert!(SignalMonitorConfig::new("", "x", Transport::Socket)
            .validate()
            .is_err());
    }

    #[test]
    fn line_timestamps() {
        assert_eq!(
            line_timestamp("1700000000123 serving on"),
            Some(1700000000123)
        );
        assert_eq!(line_timestamp("12 serving"), None);
        assert_eq!(line_timestamp("serving"), None);
    }

    fn status(started: bool, ready: bool, healthy: bool, phase: Phase) -> ContainerStatus {
        let mut s = ContainerStatus::launched(&ProbeSet::default(), 0, Duration::ZERO);
        s.started = started;
        s.ready = ready;
        s.healthy = healthy;
        s.phase = phase;
        s
    }

    fn sig(event: SignalEvent) -> Signal {
        Signal {
            container_id: "c".into(),
            event,
            emitted_at: 0,
            received_at: 0,
            transport: Transport::Socket,
        }
    }

    #[test]
    fn dispatch_table() {
        use SignalEvent::*;
        assert_eq!(
            dispatch(&sig(Ready), &status(true, false, true, Phase::Running)),
            Action::MarkReady
        );
        assert_eq!(
            dispatch(&sig(Ready), &status(true, true, true, Phase::Running)),
            Action::None
        );
        assert_eq!(
            dispatch(
                &sig(Ready),
                &status(false, false, true, Phase::Initializing)
            ),
            Action::None
        );
        assert_eq!(
            dispatch(&sig(Unhealthy), &status(true, true, true, Phase::Running)),
            Action::MarkUnhealthy
        );
        assert_eq!(
            dispatch(
                &sig(Unhealthy),
                &status(true, false, false, Phase::RestartQueued)
            ),
            Action::None
        );
        assert_eq!(
            dispatch(
                &sig(Unhealthy),
                &status(true, false, true, Phase::BackoffWait)
            ),
            Action::None
        );
        assert_eq!(
            dispatch(&sig(Heartbeat), &status(true, true, true, Phase::Running)),
            Action::None
        );
    }

    #[test]
    fn watchdog() {
        let s = Duration::from_secs_f64;
        assert_eq!(watchdog_check(s(0.0), Some(s(2.0)), s(1.5)), Action::None);
        assert_eq!(
            watchdog_check(s(0.0), Some(s(2.0)), s(2.5)),
            Action::MarkUnhealthy
        );
        assert_eq!(watchdog_check(s(0.0), None, s(1000.0)), Action::None);
    }

    #[tokio::test]
    async fn socket_frames_in_one_write_arrive_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.sock");
        let (tx, mut rx) = mpsc::unbounded_channel::<Signal>();
        let listener = SocketListener::bind(&path, tx).unwrap();
        let mut client = std::os::unix::net::UnixStream::connect(&path).unwrap();
        client
            .write_all(b"v1 a READY 1\nv1 a BOGUS 0\nv1 b UNHEALTHY 2\n")
            .unwrap();
        let first = rx.recv().await.unwrap();
        let second = rx.recv().await.unwrap();
        assert_eq!(
            (first.container_id.as_str(), first.event),
            ("a", SignalEvent::Ready)
        );
        assert_eq!(
            (second.container_id.as_str(), second.event),
            ("b", SignalEvent::Unhealthy)
        );
        assert_eq!(listener.parse_errors(), 1);
        // Connection stays open after a malformed frame.
        client.write_all(b"v1 c HEARTBEAT 3\n").unwrap();
        assert_eq!(rx.recv().await.unwrap().event, SignalEvent::Heartbeat);
    }

    #[tokio::test]
    async fn log_watcher_reads_only_its_generation() {
        let dir = tempfile::tempdir().unwrap();
        let gen0 = dir.path().join("c.0.log");
        let gen1 = dir.path().join("c.1.log");
        std::fs::write(&gen0, "1700000000000 serving on x\n").unwrap();
        let mut cfg = SignalMonitorConfig::new("serving on", "handler exited", Transport::LogTail);
        cfg.log_poll_gap = Duration::from_millis(5);
        let (tx, mut rx) = mpsc::unbounded_channel::<LogWatchItem>();
        let task = watch_logs("c".into(), gen1.clone(), cfg, Duration::ZERO, tx);
        tokio::time::sleep(Duration::from_millis(50)).await;
        let mut f = std::fs::File::create(&gen1).unwrap();
        f.write_all(b"booting\n").unwrap();
        f.write_all(b"serving on :80").unwrap();
        f.flush().unwrap();
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert!(rx.try_recv().is_err(), "partial line must not match");
        f.write_all(b"\n").unwrap();
        let item = tokio::time::timeout(Duration::from_secs(1), rx.recv())
            .await
            .unwrap()
            .unwrap();
        match item {
            LogWatchItem::Signal(s) => {
                assert_eq!(s.event, SignalEvent::Ready);
                assert_eq!(s.transport, Transport::LogTail);
            }
            other => panic!("unexpected {other:?}"),
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert!(rx.try_recv().is_err(), "exactly one READY");

        std::fs::remove_file(&gen1).unwrap();
        let item = tokio::time::timeout(Duration::from_secs(1), rx.recv())
            .await
            .unwrap()
            .unwrap();
        assert!(matches!(item, LogWatchItem::Degraded { .. }));
        task.await.unwrap();
    }
}
