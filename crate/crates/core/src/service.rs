//! The workload: a mock HTTP service run as a separate process, a stub
//! dependency it pings from `/health`, and a round-robin balancer over the
//! supervisor's ready set.

use std::fmt;
use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpSocket};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::signal::{send_frame_blocking, SignalEvent};
use crate::supervisor::{ReadySet, RunMode};
use crate::time::unix_ms;

/// Exit code of the mock when its listen port is taken.
pub const EXIT_PORT_CLASH: i32 = 3;
/// Exit code of the mock after the kill-handler fault.
pub const EXIT_KILLED: i32 = 137;
const DEPENDENCY_TIMEOUT: Duration = Duration::from_millis(200);

/// Command-line shape of the mock service binary.
#[derive(Debug, Clone, PartialEq, clap::Parser)]
#[command(
    name = "sentinel-mock",
    about = "Mock HTTP service supervised by sentinel"
)]
pub struct MockServiceConfig {
    #[arg(long)]
    pub listen: SocketAddr,
    #[arg(long, default_value_t = 0)]
    pub init_time_ms: u64,
    #[arg(long)]
    pub dependency: Option<SocketAddr>,
    #[arg(long, default_value = "serving on")]
    pub ready_log_line: String,
    #[arg(long, default_value = "handler exited")]
    pub unhealthy_log_line: String,
    /// Extra latency on `/`.
    #[arg(long, default_value_t = 0)]
    pub response_latency_ms: u64,
    #[arg(long, value_enum, default_value = "handler-as-pid1")]
    pub run_mode: RunMode,
    /// How long the lingering shell answers 500 before it stops accepting.
    #[arg(long, default_value_t = 0)]
    pub http500_window_ms: u64,
    /// File holding extra `/health` latency in ms, read on every request.
    #[arg(long)]
    pub fault_file: Option<PathBuf>,
    #[arg(long)]
    pub heartbeat_interval_ms: Option<u64>,
    /// Internal: run as the handler child of the shell wrapper.
    #[arg(long, hide = true)]
    pub as_handler: bool,
}

impl MockServiceConfig {
    pub fn new(listen: SocketAddr) -> Self {
        Self {
            listen,
            init_time_ms: 0,
            dependency: None,
            ready_log_line: "serving on".into(),
            unhealthy_log_line: "handler exited".into(),
            response_latency_ms: 0,
            run_mode: RunMode::HandlerAsPid1,
            http500_window_ms: 0,
            fault_file: None,
            heartbeat_interval_ms: None,
            as_handler: false,
        }
    }

    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec![
            "--listen".to_string(),
            self.listen.to_string(),
            "--init-time-ms".into(),
            self.init_time_ms.to_string(),
            "--ready-log-line".into(),
            self.ready_log_line.clone(),
            "--unhealthy-log-line".into(),
            self.unhealthy_log_line.clone(),
            "--response-latency-ms".into(),
            self.response_latency_ms.to_string(),
            "--run-mode".into(),
            match self.run_mode {
                RunMode::HandlerAsPid1 => "handler-as-pid1".into(),
                RunMode::HandlerUnderShell => "handler-under-shell".into(),
            },
            "--http500-window-ms".into(),
            self.http500_window_ms.to_string(),
        ];
        if let Some(dep) = self.dependency {
            args.extend(["--dependency".into(), dep.to_string()]);
        }
        if let Some(path) = &self.fault_file {
            args.extend(["--fault-file".into(), path.display().to_string()]);
        }
        if let Some(ms) = self.heartbeat_interval_ms {
            args.extend(["--heartbeat-interval-ms".into(), ms.to_string()]);
        }
        if self.as_handler {
            args.push("--as-handler".into());
        }
        args
    }
}

fn say(line: impl fmt::Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} {line}", unix_ms());
    let _ = out.flush();
}

fn notify(event: SignalEvent) {
    let (Ok(socket), Ok(id)) = (
        std::env::var("SENTINEL_NOTIFY_SOCKET"),
        std::env::var("SENTINEL_CONTAINER_ID"),
    ) else {
        return;
    };
    if let Err(e) = send_frame_blocking(Path::new(&socket), &id, event) {
        say(format_args!("signal {event} not delivered: {e}"));
    }
}

/// Reads the injected `/health` latency; a missing or unreadable file is zero.
pub fn read_fault_latency(path: Option<&Path>) -> Duration {
    path.and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(Duration::from_millis)
        .unwrap_or(Duration::ZERO)
}

/// Entry point of the mock binary; returns the process exit code.
pub async fn run_mock(cfg: MockServiceConfig) -> i32 {
    if cfg.run_mode == RunMode::HandlerUnderShell && !cfg.as_handler {
        run_shell(cfg).await
    } else {
        run_handler(cfg).await
    }
}

struct HandlerState {
    ready: AtomicBool,
    dependency: Option<SocketAddr>,
    fault_file: Option<PathBuf>,
    response_latency: Duration,
}

async fn run_handler(cfg: MockServiceConfig) -> i32 {
    let listener = match std::net::TcpListener::bind(cfg.listen) {
        Ok(l) => l,
        Err(e) => {
            say(format_args!("cannot bind {}: {e}", cfg.listen));
            return EXIT_PORT_CLASH;
        }
    };
    listener
        .set_nonblocking(true)
        .expect("nonblocking listener");
    let listener = TcpListener::from_std(listener).expect("tokio listener");
    say(format_args!(
        "booting pid={} init_time_ms={}",
        std::process::id(),
        cfg.init_time_ms
    ));

    let state = Arc::new(HandlerState {
        ready: AtomicBool::new(false),
        dependency: cfg.dependency,
        fault_file: cfg.fault_file.clone(),
        response_latency: Duration::from_millis(cfg.response_latency_ms),
    });
    let init_state = Arc::clone(&state);
    let ready_line = format!("{} on {}", cfg.ready_log_line, cfg.listen);
    tokio::spawn(async move {
        tokio::time::sleep(Duration::from_millis(cfg.init_time_ms)).await;
        init_state.ready.store(true, Ordering::SeqCst);
        say(&ready_line);
        notify(SignalEvent::Ready);
    });
    if let Some(ms) = cfg.heartbeat_interval_ms.filter(|ms| *ms > 0) {
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(ms));
            loop {
                tick.tick().await;
                tokio::task::spawn_blocking(|| notify(SignalEvent::Heartbeat));
            }
        });
    }

    let app = Router::new()
        .route("/", get(root))
        .route("/health", get(health))
        .route("/fault/kill", post(kill))
        .with_state(state);
    match axum::serve(listener, app).await {
        Ok(()) => 0,
        Err(e) => {
            say(format_args!("server error: {e}"));
            1
        }
    }
}

async fn root(State(state): State<Arc<HandlerState>>) -> (StatusCode, &'static str) {
    if !state.ready.load(Ordering::SeqCst) {
        return (StatusCode::SERVICE_UNAVAILABLE, "initializing");
    }
    if !state.response_latency.is_zero() {
        tokio::time::sleep(state.response_latency).await;
    }
    (StatusCode::OK, "catalogue")
}

async fn health(State(state): State<Arc<HandlerState>>) -> (StatusCode, &'static str) {
    if !state.ready.load(Ordering::SeqCst) {
        return (StatusCode::SERVICE_UNAVAILABLE, "initializing");
    }
    let latency = read_fault_latency(state.fault_file.as_deref());
    if !latency.is_zero() {
        tokio::time::sleep(latency).await;
    }
    if let Some(dep) = state.dependency {
        let reachable = matches!(
            tokio::time::timeout(DEPENDENCY_TIMEOUT, tokio::net::TcpStream::connect(dep)).await,
            Ok(Ok(_))
        );
        if !reachable {
            return (StatusCode::SERVICE_UNAVAILABLE, "dependency unreachable");
        }
    }
    (StatusCode::OK, "ok")
}

async fn kill() -> &'static str {
    say("kill fault received; handler exiting");
    std::thread::spawn(|| {
        std::thread::sleep(Duration::from_millis(10));
        std::process::exit(EXIT_KILLED);
    });
    "bye"
}

extern "C" fn ignore_signal(_: libc::c_int) {}

/// The wrapper: runs the handler as a child, and after it dies logs the
/// failure and hangs while still holding the port.
async fn run_shell(cfg: MockServiceConfig) -> i32 {
    // A caught (not ignored) SIGTERM: the exec'd handler gets the default
    // disposition back, while the wrapper itself keeps running.
    // SAFETY: installs an async-signal-safe no-op handler.
    unsafe {
        libc::signal(
            libc::SIGTERM,
            ignore_signal as *const () as libc::sighandler_t,
        );
    }
    let exe = match std::env::current_exe() {
        Ok(exe) => exe,
        Err(e) => {
            say(format_args!("cannot locate own executable: {e}"));
            return 1;
        }
    };
    let mut handler_cfg = cfg.clone();
    handler_cfg.as_handler = true;
    let status = tokio::process::Command::new(exe)
        .args(handler_cfg.to_args())
        .status()
        .await;
    let how = match status {
        Ok(s) => s.to_string(),
        Err(e) => format!("spawn failed: {e}"),
    };
    say(format_args!("{}: {how}", cfg.unhealthy_log_line));
    tokio::task::spawn_blocking(|| notify(SignalEvent::Unhealthy));

    let listener = match bind_reuse(cfg.listen) {
        Ok(l) => l,
        Err(e) => {
            say(format_args!("cannot rebind {}: {e}", cfg.listen));
            std::future::pending::<()>().await;
            unreachable!()
        }
    };
    let window = Duration::from_millis(cfg.http500_window_ms);
    if !window.is_zero() {
        let deadline = tokio::time::Instant::now() + window;
        while let Ok(Ok((stream, _))) = tokio::time::timeout_at(deadline, listener.accept()).await {
            tokio::spawn(answer_500(stream));
        }
    }
    // Hold the listener without accepting: clients connect and time out.
    let _held = listener;
    std::future::pending::<()>().await;
    unreachable!()
}

async fn answer_500(mut stream: tokio::net::TcpStream) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut buf = [0u8; 1024];
    let _ = tokio::time::timeout(Duration::from_millis(200), stream.read(&mut buf)).await;
    let _ = stream
        .write_all(
            b"HTTP/1.1 500 Internal Server Error\r\nContent-Length: 0\r\nConnection: close\r\n\r\n",
        )
        .await;
}

fn bind_reuse(addr: SocketAddr) -> std::io::Result<TcpListener> {
    let socket = if addr.is_ipv4() {
        TcpSocket::new_v4()?
    } else {
        TcpSocket::new_v6()?
    };
    socket.set_reuseaddr(true)?;
    socket.bind(addr)?;
    socket.listen(128)
}

/// Stand-in for the service's database: accepts TCP connections and
/// closes them. Can be taken down and brought back on the same port.
#[derive(Debug)]
pub struct DependencyStub {
    addr: SocketAddr,
    task: Option<JoinHandle<()>>,
}

impl DependencyStub {
    pub async fn start(addr: SocketAddr) -> std::io::Result<Self> {
        let mut stub = Self { addr, task: None };
        stub.up()?;
        Ok(stub)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_up(&self) -> bool {
        self.task.is_some()
    }

    pub fn up(&mut self) -> std::io::Result<()> {
        if self.task.is_some() {
            return Ok(());
        }
        let listener = bind_reuse(self.addr)?;
        self.task = Some(tokio::spawn(async move {
            while let Ok((stream, _)) = listener.accept().await {
                drop(stream);
            }
        }));
        Ok(())
    }

    pub fn down(&mut self) {
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}

impl Drop for DependencyStub {
    fn drop(&mut self) {
        self.down();
    }
}

/// Per-request result as seen by the load generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOutcome {
    Success,
    Timeout,
    /// Any error status from a container.
    Http500,
    /// No ready container, or the connection was refused or reset.
    Refused,
}

/// What the balancer does with a request while no container is ready.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnavailableMode {
    /// Fail immediately.
    #[default]
    Refuse,
    /// Hold the request until the client gives up.
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub chosen: Option<(String, SocketAddr)>,
    pub timestamp: u64,
}

/// Client-side round robin over one service's ready set.
#[derive(Debug)]
pub struct Balancer {
    service: String,
    ready: watch::Receiver<ReadySet>,
    cursor: AtomicUsize,
    client: reqwest::Client,
    timeout: Duration,
    unavailable: UnavailableMode,
    clock: crate::time::RunClock,
}

impl Balancer {
    pub fn new(
        service: impl Into<String>,
        ready: watch::Receiver<ReadySet>,
        timeout: Duration,
        unavailable: UnavailableMode,
        start_offset: usize,
        clock: crate::time::RunClock,
    ) -> Self {
        Self {
            service: service.into(),
            ready,
            cursor: AtomicUsize::new(start_offset),
            client: crate::probe::http_client(),
            timeout,
            unavailable,
            clock,
        }
    }

    pub fn route(&self) -> RouteDecision {
        let endpoints = self.ready.borrow().endpoints(&self.service);
        let chosen = if endpoints.is_empty() {
            None
        } else {
            let i = self.cursor.fetch_add(1, Ordering::Relaxed) % endpoints.len();
            Some(endpoints[i].clone())
        };
        RouteDecision {
            chosen,
            timestamp: self.clock.now_ms(),
        }
    }

    /// Routes one `GET path` and classifies the result.
    pub async fn forward(&self, path: &str) -> RequestOutcome {
        let Some((_, addr)) = self.route().chosen else {
            return match self.unavailable {
                UnavailableMode::Refuse => RequestOutcome::Refused,
                UnavailableMode::Drop => {
                    tokio::time::sleep(self.timeout).await;
                    RequestOutcome::Timeout
                }
            };
        };
        let url = format!("http://{addr}{path}");
        let request = async {
            let response = self.client.get(&url).send().await?;
            let status = response.status();
            let _ = response.bytes().await;
            Ok::<_, reqwest::Error>(status)
        };
        match tokio::time::timeout(self.timeout, request).await {
            Err(_) => RequestOutcome::Timeout,
            Ok(Err(e)) if e.is_timeout() => RequestOutcome::Timeout,
            Ok(Err(_)) => RequestOutcome::Refused,
            Ok(Ok(status)) if status.is_success() || status.is_redirection() => {
                RequestOutcome::Success
            }
            Ok(Ok(_)) => RequestOutcome::Http500,
        }
    }
}

/// Sends the kill-handler fault to a mock service. Returns false when the
/// handler could not be reached.
pub fn send_kill(addr: SocketAddr, limit: Duration) -> bool {
    let Ok(mut stream) = std::net::TcpStream::connect_timeout(&addr, limit) else {
        return false;
    };
    let _ = stream.set_read_timeout(Some(limit));
    let _ = stream.set_write_timeout(Some(limit));
    let request = format!(
        "POST /fault/kill HTTP/1.1\r\nHost: {addr}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
    );
    if stream.write_all(request.as_bytes()).is_err() {
        return false;
    }
    let mut response = String::new();
    let _ = stream.read_to_string(&mut response);
    response.starts_with("HTTP/1.1 200")
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[test]
    fn args_round_trip() {
        let mut cfg = MockServiceConfig::new("127.0.0.1:20001".parse().unwrap());
        cfg.init_time_ms = 1500;
        cfg.dependency = Some("127.0.0.1:20002".parse().unwrap());
        cfg.run_mode = RunMode::HandlerUnderShell;
        cfg.fault_file = Some("/tmp/x.latency_ms".into());
        cfg.heartbeat_interval_ms = Some(250);
        cfg.http500_window_ms = 700;
        let mut argv = vec!["sentinel-mock".to_string()];
        argv.extend(cfg.to_args());
        assert_eq!(MockServiceConfig::try_parse_from(argv).unwrap(), cfg);
    }

    #[test]
    fn fault_latency_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.latency_ms");
        assert_eq!(read_fault_latency(Some(&path)), Duration::ZERO);
        std::fs::write(&path, "600\n").unwrap();
        assert_eq!(read_fault_latency(Some(&path)), Duration::from_millis(600));
        std::fs::write(&path, "garbage").unwrap();
        assert_eq!(read_fault_latency(Some(&path)), Duration::ZERO);
        assert_eq!(read_fault_latency(None), Duration::ZERO);
    }

    fn ready_set(ids: &[&str]) -> ReadySet {
        let mut set = ReadySet::default();
        for (i, id) in ids.iter().enumerate() {
            set.insert(
                "svc",
                id,
                SocketAddr::from(([127, 0, 0, 1], 1000 + i as u16)),
            );
        }
        set
    }

    #[test]
    fn round_robin_order() {
        let (_tx, rx) = watch::channel(ready_set(&["a", "b"]));
        let lb = Balancer::new(
            "svc",
            rx,
            Duration::from_millis(500),
            UnavailableMode::Refuse,
            0,
            crate::time::RunClock::start(),
        );
        let picks: Vec<String> = (0..4).map(|_| lb.route().chosen.unwrap().0).collect();
        assert_eq!(picks, ["a", "b", "a", "b"]);

        let (_tx, rx) = watch::channel(ready_set(&["a"]));
        let lb = Balancer::new(
            "svc",
            rx,
            Duration::from_millis(500),
            UnavailableMode::Refuse,
            7,
            crate::time::RunClock::start(),
        );
        assert_eq!(lb.route().chosen.unwrap().0, "a");
    }

    #[tokio::test]
    async fn empty_ready_set_is_unavailable() {
        let (_tx, rx) = watch::channel(ReadySet::default());
        let clock = crate::time::RunClock::start();
        let lb = Balancer::new(
            "svc",
            rx.clone(),
            Duration::from_millis(200),
            UnavailableMode::Refuse,
            0,
            clock,
        );
        assert_eq!(lb.route().chosen, None);
        assert_eq!(lb.forward("/").await, RequestOutcome::Refused);
        let lb = Balancer::new(
            "svc",
            rx,
            Duration::from_millis(200),
            UnavailableMode::Drop,
            0,
            clock,
        );
        let t = std::time::Instant::now();
        assert_eq!(lb.forward("/").await, RequestOutcome::Timeout);
        assert!(t.elapsed() >= Duration::from_millis(200));
    }

    #[tokio::test]
    async fn dependency_stub_down_and_up() {
        let port = crate::net::allocate_port().unwrap();
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let mut stub = DependencyStub::start(addr).await.unwrap();
        assert!(tokio::net::TcpStream::connect(addr).await.is_ok());
        stub.down();
        tokio::task::yield_now().await;
        tokio::time::sleep(Duration::from_millis(20)).await;
        assert!(tokio::net::TcpStream::connect(addr).await.is_err());
        stub.up().unwrap();
        assert!(tokio::net::TcpStream::connect(addr).await.is_ok());
    }
}
