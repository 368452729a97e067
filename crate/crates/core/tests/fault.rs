mod common;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use sentinel::eventlog::EventLog;
use sentinel::fault::{
    inject, ContainerTarget, FaultKind, FaultOutcome, FaultTargets, ResolvedFault,
};
use sentinel::service::{DependencyStub, MockServiceConfig};
use sentinel::time::RunClock;

fn resolved(kind: FaultKind, target: &str, latency_ms: Option<u64>) -> ResolvedFault {
    ResolvedFault {
        index: 0,
        at: Duration::ZERO,
        target: target.into(),
        kind,
        latency_ms,
    }
}

#[tokio::test]
async fn latency_fault_slows_health_until_cleared() {
    let dir = tempfile::tempdir().unwrap();
    let latency_file = dir.path().join("c1.latency_ms");
    let mut cfg = MockServiceConfig::new(free_addr());
    cfg.fault_file = Some(latency_file.clone());
    let m = MockProcess::spawn(&cfg, &[]);
    let short = Duration::from_millis(500);
    assert!(
        wait_until(Duration::from_secs(3), || async {
            get_status(m.addr, "/health", short).await == Some(200)
        })
        .await
    );

    let targets = FaultTargets {
        containers: HashMap::from([(
            "c1".to_string(),
            ContainerTarget {
                addr: m.addr,
                latency_file,
            },
        )]),
        dependencies: Default::default(),
    };
    let log = EventLog::create(dir.path().join("events.ndjson"), RunClock::start()).unwrap();
    let rec = inject(
        &resolved(FaultKind::Latency, "c1", Some(600)),
        &targets,
        &log,
    )
    .await;
    assert_eq!(rec.outcome, FaultOutcome::Applied);

    let t = Instant::now();
    assert_eq!(
        get_status(m.addr, "/health", Duration::from_secs(2)).await,
        Some(200)
    );
    assert!(t.elapsed() >= Duration::from_millis(600));
    // A probe with a 0.5s timeout now fails; `/` is unaffected.
    assert_eq!(get_status(m.addr, "/health", short).await, None);
    assert_eq!(get_status(m.addr, "/", short).await, Some(200));

    inject(&resolved(FaultKind::Latency, "c1", Some(0)), &targets, &log).await;
    let t = Instant::now();
    assert_eq!(get_status(m.addr, "/health", short).await, Some(200));
    assert!(t.elapsed() < Duration::from_millis(300));
}

#[tokio::test]
async fn kill_and_dependency_faults_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MockServiceConfig::new(free_addr());
    let m = MockProcess::spawn(&cfg, &[]);
    let short = Duration::from_millis(500);
    assert!(
        wait_until(Duration::from_secs(3), || async {
            get_status(m.addr, "/", short).await == Some(200)
        })
        .await
    );
    let dep = DependencyStub::start(free_addr()).await.unwrap();
    let dep_addr = dep.addr();
    let targets = Arc::new(FaultTargets {
        containers: HashMap::from([(
            "c1".to_string(),
            ContainerTarget {
                addr: m.addr,
                latency_file: dir.path().join("unused"),
            },
        )]),
        dependencies: tokio::sync::Mutex::new(HashMap::from([("db".to_string(), dep)])),
    });
    let log =
        Arc::new(EventLog::create(dir.path().join("events.ndjson"), RunClock::start()).unwrap());

    let down = inject(
        &resolved(FaultKind::DependencyDown, "db", None),
        &targets,
        &log,
    )
    .await;
    assert_eq!(down.outcome, FaultOutcome::Applied);
    assert!(tokio::net::TcpStream::connect(dep_addr).await.is_err());
    let again = inject(
        &resolved(FaultKind::DependencyDown, "db", None),
        &targets,
        &log,
    )
    .await;
    assert_eq!(again.outcome, FaultOutcome::Noop);
    let up = inject(
        &resolved(FaultKind::DependencyUp, "db", None),
        &targets,
        &log,
    )
    .await;
    assert_eq!(up.outcome, FaultOutcome::Applied);
    assert!(tokio::net::TcpStream::connect(dep_addr).await.is_ok());

    let kill = inject(
        &resolved(FaultKind::KillHandler, "c1", None),
        &targets,
        &log,
    )
    .await;
    assert_eq!(kill.outcome, FaultOutcome::Applied);
    assert!(
        wait_until(Duration::from_secs(2), || async {
            get_status(m.addr, "/", short).await.is_none()
        })
        .await
    );
    let second = inject(
        &resolved(FaultKind::KillHandler, "c1", None),
        &targets,
        &log,
    )
    .await;
    assert_eq!(second.outcome, FaultOutcome::Noop);

    log.flush();
    let records = sentinel::eventlog::read_records(log.path()).unwrap();
    assert_eq!(records.len(), 5);
}
