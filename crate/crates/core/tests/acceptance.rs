//! Acceptance suite: one PASS/FAIL line per criterion. The live scenarios
//! run concurrently; the longest is the 290s no-fault run, so the whole
//! target takes a little over five minutes.

mod common;

use std::path::Path;
use std::time::Duration;

use common::*;
use sentinel::config::RunConfig;
use sentinel::fault::{FaultKind, FaultPlan};
use sentinel::harness::metrics::{measure_detection_times, summarize, Detection, RunEvents};
use sentinel::harness::validate::detecting_probe_latencies;
use sentinel::harness::{LoadModel, StartMode};
use sentinel::model;
use sentinel::service::UnavailableMode;
use sentinel::state_machine::{
    compute_backoff_delay, record_probe_result, Action, ContainerStatus, MonitoringPolicy,
    PolicyVariant, ProbeConfig, ProbeKind, ProbeOutcome, ProbeSet,
};
use sentinel::supervisor::{LifecycleKind, RunMode};

const MODEL_EPS: f64 = 1e-9;
const SCM_QUEUE_MAX_S: f64 = 0.3;
/// (N - 1/2) * I for N = 1, I = 1s.
const FP_QUEUE_FLOOR_S: f64 = 0.5;
const FP_QUEUE_SLACK_S: f64 = 0.3;
/// (N - 1/2) * I for N = 3, I = 3s.
const DP_QUEUE_FLOOR_S: f64 = 7.5;
const DP_QUEUE_SLACK_S: f64 = 1.5;
const DP_READY_S: f64 = 18.0;
const DP_READY_TOL_S: f64 = 1.5;
const FP_READY_MAX_S: f64 = 3.0;
const TIMEOUT_COUNT_TOL_S: f64 = 1.0;
const GRACE_MS: u64 = 2_000;
const GRACE_TOL_MS: u64 = 200;
const RESTART_AFTER_QUEUE_S: (f64, f64) = (2.0, 2.6);
const BACKOFF_RESTARTS: u32 = 5;
const BACKOFF_EXPECTED_S: [u64; 5] = [0, 0, 10, 20, 40];
const AVAILABILITY_TOL: f64 = 1.0;
const FULL_WINDOW_S: u64 = 290;
const FULL_RATE: f64 = 100.0;
const ATTEMPTS_TOL: f64 = 0.01;
const FAILURES_MAX: f64 = 0.001;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn failed(name: &'static str, err: &str) -> Verdict {
    verdict(name, false, format!("scenario failed: {err}"))
}

fn first_detection(run: &RunEvents) -> Option<Detection> {
    measure_detection_times(run).into_iter().next()
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn queue_times(runs: &[RunEvents]) -> Vec<f64> {
    runs.iter()
        .map(|r| {
            first_detection(r)
                .and_then(|d| d.queue_s)
                .unwrap_or(f64::NAN)
        })
        .collect()
}

fn detecting_latency(runs: &[RunEvents]) -> f64 {
    let ls: Vec<f64> = runs
        .iter()
        .flat_map(|r| {
            first_detection(r)
                .map(|d| detecting_probe_latencies(r, &d))
                .unwrap_or_default()
        })
        .collect();
    mean(&ls)
}

fn restarts(run: &RunEvents) -> Vec<u64> {
    run.lifecycle
        .iter()
        .filter(|e| e.event == LifecycleKind::Restarted)
        .map(|e| e.timestamp)
        .collect()
}

// Scenario configurations.

fn liveness_run(
    preset_name: &str,
    name: &str,
    reps: u32,
    at: f64,
    jitter: f64,
    window: f64,
) -> RunConfig {
    let mut cfg = preset(preset_name);
    cfg.experiment.name = name.into();
    cfg.experiment.repetitions = reps;
    cfg.experiment.request_rate = 20.0;
    cfg.experiment.warmup = secs(1.0);
    cfg.experiment.window = secs(window);
    cfg.faults = kill(at, jitter);
    cfg
}

fn readiness_run(preset_name: &str, name: &str, reps: u32, at: f64, window: f64) -> RunConfig {
    let mut cfg = preset(preset_name);
    cfg.experiment.name = name.into();
    cfg.experiment.repetitions = reps;
    cfg.experiment.warmup = secs(1.0);
    cfg.experiment.window = secs(window);
    cfg.experiment.load_model = LoadModel::PacedUser;
    cfg.experiment.unavailable = UnavailableMode::Drop;
    cfg.services[0].run_mode = RunMode::HandlerAsPid1;
    cfg.services[0].http500_window_ms = 0;
    cfg.faults = kill(at, 1.0);
    cfg
}

fn backoff_run() -> RunConfig {
    let mut cfg = preset("fp-readiness");
    cfg.experiment.name = "backoff".into();
    cfg.experiment.repetitions = 1;
    cfg.experiment.request_rate = 5.0;
    cfg.experiment.start = StartMode::Immediate;
    cfg.experiment.window = secs(78.0);
    cfg.services[0].command = Some(vec!["sh".into(), "-c".into(), "sleep 0.3; exit 1".into()]);
    cfg.monitoring.values_mut().for_each(|b| b.probes.clear());
    cfg.faults = FaultPlan::default();
    cfg
}

fn latency_run(preset_name: &str, name: &str, clear_probes: bool) -> RunConfig {
    let mut cfg = preset(preset_name);
    cfg.experiment.name = name.into();
    cfg.experiment.repetitions = 1;
    cfg.experiment.request_rate = 20.0;
    cfg.experiment.warmup = secs(1.0);
    cfg.experiment.window = secs(40.0);
    if clear_probes {
        cfg.monitoring.values_mut().for_each(|b| b.probes.clear());
    }
    cfg.faults = FaultPlan {
        entries: vec![latency(2.0, 600), latency(32.0, 0)],
    };
    cfg
}

fn dependency_run(name: &str, tolerate: bool) -> RunConfig {
    let mut cfg = preset("fp-liveness");
    cfg.experiment.name = name.into();
    cfg.experiment.repetitions = 1;
    cfg.experiment.request_rate = 5.0;
    cfg.experiment.start = StartMode::Immediate;
    cfg.experiment.window = secs(35.0);
    let block = cfg.monitoring.values_mut().next().unwrap();
    let mut live = ProbeConfig::http(ProbeKind::Liveness, secs(1.0));
    live.failure_threshold = 3;
    if tolerate {
        block.policy = PolicyVariant::TolerateFailures;
        block.tolerate_window = Some(secs(10.0));
    } else {
        block.policy = PolicyVariant::DelayedProbes;
        live.initial_delay = secs(30.0);
    }
    block.probes = vec![live];
    cfg.faults = FaultPlan {
        entries: vec![
            fault(0.0, "catalogue-db", FaultKind::DependencyDown),
            fault(25.0, "catalogue-db", FaultKind::DependencyUp),
        ],
    };
    cfg
}

fn no_fault_run() -> RunConfig {
    let mut cfg = preset("fp-readiness");
    cfg.experiment.name = "no-fault".into();
    cfg.experiment.repetitions = 1;
    cfg.experiment.request_rate = FULL_RATE;
    cfg.experiment.warmup = secs(1.0);
    cfg.experiment.window = Duration::from_secs(FULL_WINDOW_S);
    // A single slow probe should not count as an outage in a no-fault run.
    for block in cfg.monitoring.values_mut() {
        for p in &mut block.probes {
            p.failure_threshold = 3;
        }
    }
    cfg.faults = FaultPlan::default();
    cfg
}

// Criteria.

fn model_suite() -> Verdict {
    let cases = [
        ("pcm(3,3,0.2)", model::predict_failure_pcm(3, 3.0, 0.2), 7.7),
        ("pcm(1,1,0.2)", model::predict_failure_pcm(1, 1.0, 0.2), 0.7),
        (
            "scm_ready(2,2.8,0.1)",
            model::predict_readiness_scm(2.0, 2.8, 0.1),
            2.9,
        ),
        (
            "pcm_ready(2,180,1,3,0.2)",
            model::predict_readiness_pcm(2.0, 180.0, 1, 3.0, 0.2),
            180.2,
        ),
    ];
    let mut pass = true;
    let mut detail = vec![];
    for (name, got, want) in cases {
        let ok = got.as_ref().is_ok_and(|g| (g - want).abs() <= MODEL_EPS);
        pass &= ok;
        detail.push(format!("{name}={got:?}"));
    }
    verdict("model suite", pass, detail.join(" "))
}

fn state_machine_oracle() -> Verdict {
    let mut checked = 0u64;
    let mut mismatches = 0u64;
    for threshold in 1..=3u32 {
        let mut live = ProbeConfig::http(ProbeKind::Liveness, secs(1.0));
        live.failure_threshold = threshold;
        let probes = ProbeSet::new([live]).unwrap();
        let policy = MonitoringPolicy::delayed_probes();
        for len in 0..=10usize {
            for bits in 0u32..(1 << len) {
                let seq: Vec<ProbeOutcome> = (0..len)
                    .map(|i| {
                        if bits >> i & 1 == 1 {
                            ProbeOutcome::Failure
                        } else {
                            ProbeOutcome::Success
                        }
                    })
                    .collect();
                let mut status = ContainerStatus::launched(&probes, 0, Duration::ZERO);
                let mut emitted = None;
                for (i, o) in seq.iter().enumerate() {
                    let (next, action) = record_probe_result(
                        &status,
                        ProbeKind::Liveness,
                        *o,
                        &probes,
                        &policy,
                        secs(i as f64),
                    )
                    .unwrap();
                    if action == Action::MarkUnhealthy && emitted.is_none() {
                        emitted = Some(i);
                    }
                    status = next;
                }
                let n = threshold as usize;
                let scan = (0..len).find(|&i| {
                    i + 1 >= n
                        && seq[i + 1 - n..=i]
                            .iter()
                            .all(|o| *o == ProbeOutcome::Failure)
                });
                checked += 1;
                if emitted != scan {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(
        "state-machine oracle",
        mismatches == 0,
        format!("{checked} sequences (lengths 0..=10, N=1..=3), {mismatches} mismatches"),
    )
}

fn scm_failure(ski: &[RunEvents]) -> Verdict {
    let q = queue_times(ski);
    let m = mean(&q);
    verdict(
        "SCM failure detection",
        ski.len() == 5 && m <= SCM_QUEUE_MAX_S,
        format!(
            "mean T_queue {m:.3}s <= {SCM_QUEUE_MAX_S}s over {} reps {}",
            ski.len(),
            fmt(&q)
        ),
    )
}

fn pcm_failure(fp: &[RunEvents], dp: &[RunEvents]) -> Verdict {
    let (fq, dq) = (queue_times(fp), queue_times(dp));
    let (fm, dm) = (mean(&fq), mean(&dq));
    let (fl, dl) = (detecting_latency(fp), detecting_latency(dp));
    let fp_hi = FP_QUEUE_FLOOR_S + fl + FP_QUEUE_SLACK_S;
    let dp_hi = DP_QUEUE_FLOOR_S + dl + DP_QUEUE_SLACK_S;
    let pass = (FP_QUEUE_FLOOR_S..=fp_hi).contains(&fm) && (DP_QUEUE_FLOOR_S..=dp_hi).contains(&dm);
    verdict(
        "PCM failure detection",
        pass,
        format!(
            "FP mean {fm:.3}s in [{FP_QUEUE_FLOOR_S}, {fp_hi:.3}] (L_l {fl:.3}s) {}; DP mean {dm:.3}s in [{DP_QUEUE_FLOOR_S}, {dp_hi:.3}] (L_l {dl:.3}s) {}",
            fmt(&fq),
            fmt(&dq)
        ),
    )
}

fn ordering(ski: &[RunEvents], fp: &[RunEvents], dp: &[RunEvents]) -> Verdict {
    let (s, f, d) = (queue_times(ski), queue_times(fp), queue_times(dp));
    let n = s.len();
    let pass = n > 0 && f.len() >= n && d.len() >= n && (0..n).all(|i| s[i] < f[i] && f[i] < d[i]);
    verdict(
        "SCM-vs-PCM ordering",
        pass,
        format!(
            "per rep SKI {} < FP {} < DP {}",
            fmt(&s),
            fmt(&f[..n.min(f.len())]),
            fmt(&d[..n.min(d.len())])
        ),
    )
}

fn readiness_recovery(dp: &[RunEvents], fp: &[RunEvents]) -> Verdict {
    let ready = |runs: &[RunEvents]| -> Vec<f64> {
        runs.iter()
            .map(|r| {
                first_detection(r)
                    .and_then(|d| d.ready_s)
                    .unwrap_or(f64::NAN)
            })
            .collect()
    };
    let (dr, fr) = (ready(dp), ready(fp));
    let (dm, fm) = (mean(&dr), mean(&fr));
    let gaps: Vec<f64> = dp
        .iter()
        .chain(fp)
        .map(|r| {
            let t = first_detection(r)
                .and_then(|d| d.ready_s)
                .unwrap_or(f64::NAN);
            (summarize(r).readiness_detection_s - t).abs()
        })
        .collect();
    let corroborated = gaps.iter().all(|g| *g <= TIMEOUT_COUNT_TOL_S);
    let pass = (dm - DP_READY_S).abs() <= DP_READY_TOL_S && fm <= FP_READY_MAX_S && corroborated;
    verdict(
        "Readiness recovery",
        pass,
        format!(
            "DP mean T_ready {dm:.3}s (18 +/- {DP_READY_TOL_S}) {}; FP mean {fm:.3}s <= {FP_READY_MAX_S}s {}; |timeouts*0.5 - T_ready| {} <= {TIMEOUT_COUNT_TOL_S}s",
            fmt(&dr),
            fmt(&fr),
            fmt(&gaps)
        ),
    )
}

fn grace_period(fp: &[RunEvents]) -> Verdict {
    let mut pass = !fp.is_empty();
    let mut kills = vec![];
    let mut spans = vec![];
    for run in fp {
        let Some(d) = first_detection(run) else {
            pass = false;
            continue;
        };
        match (d.sigterm_at, d.sigkill_at, d.queue_s, d.restart_s) {
            (Some(term), Some(kill), Some(q), Some(r)) => {
                let gap = kill.saturating_sub(term);
                pass &= gap.abs_diff(GRACE_MS) <= GRACE_TOL_MS;
                pass &= (RESTART_AFTER_QUEUE_S.0..=RESTART_AFTER_QUEUE_S.1).contains(&(r - q));
                kills.push(gap as f64 / 1000.0);
                spans.push(r - q);
            }
            _ => pass = false,
        }
    }
    verdict(
        "Grace-period semantics",
        pass,
        format!(
            "sigkill - sigterm {} (2 +/- 0.2s); T_restart - T_queue {} in [{}, {}]",
            fmt(&kills),
            fmt(&spans),
            RESTART_AFTER_QUEUE_S.0,
            RESTART_AFTER_QUEUE_S.1
        ),
    )
}

fn backoff(run: &RunEvents) -> Verdict {
    let id = "catalogue-1";
    let events: Vec<_> = run
        .lifecycle
        .iter()
        .filter(|e| e.container_id == id)
        .collect();
    let mut delays = vec![];
    let mut pass = true;
    let mut n = 0u32;
    let mut last_exit = None;
    for e in &events {
        match e.event {
            LifecycleKind::Exited => last_exit = Some(e.timestamp),
            LifecycleKind::Restarted if n < BACKOFF_RESTARTS => {
                n += 1;
                let want = compute_backoff_delay(n).unwrap();
                assert_eq!(want.as_secs(), BACKOFF_EXPECTED_S[n as usize - 1]);
                let since_exit = last_exit.map(|x| e.timestamp - x).unwrap_or(0);
                pass &= since_exit >= want.as_millis() as u64;
                delays.push(since_exit as f64 / 1000.0);
            }
            _ => {}
        }
    }
    pass &= n == BACKOFF_RESTARTS;
    verdict(
        "Backoff",
        pass,
        format!(
            "exit-to-restart delays {} >= {:?}s",
            fmt(&delays),
            BACKOFF_EXPECTED_S
        ),
    )
}

fn erroneous_restart(fp: &RunEvents, ski: &RunEvents) -> Verdict {
    let (fs, ss) = (summarize(fp), summarize(ski));
    let w = ski.window_s() as f64;
    let fp_restarts = restarts(fp).len();
    let ski_restarts = restarts(ski).len();
    let pass = fp_restarts >= 1
        && fs.availability < w - AVAILABILITY_TOL
        && ski_restarts == 0
        && (ss.availability - w).abs() <= AVAILABILITY_TOL;
    verdict(
        "Erroneous-restart contrast",
        pass,
        format!(
            "FP restarts {fp_restarts} availability {:.0}; SKI restarts {ski_restarts} availability {:.0} (window {w} +/- 1)",
            fs.availability, ss.availability
        ),
    )
}

fn tolerate_bug(tolerate: &RunEvents, delayed: &RunEvents) -> Verdict {
    let up = tolerate
        .faults
        .iter()
        .find(|f| f.kind == FaultKind::DependencyUp)
        .map(|f| f.timestamp);
    let early: Vec<u64> = restarts(tolerate)
        .into_iter()
        .filter(|t| up.is_some_and(|u| *t < u))
        .collect();
    let delayed_restarts = restarts(delayed).len();
    verdict(
        "Tolerate-window restart bug",
        !early.is_empty() && delayed_restarts == 0,
        format!(
            "tolerate_failures restarts before dependency_up: {}; delayed_probes restarts: {delayed_restarts}",
            early.len()
        ),
    )
}

fn availability_and_replay(run: &RunEvents, dir: &Path) -> Verdict {
    let s = summarize(run);
    let expected = (FULL_WINDOW_S + 1) as f64;
    let avail_ok = (s.availability - expected).abs() <= AVAILABILITY_TOL;
    let out = dir.join("replayed");
    let status = std::process::Command::new(sentinel_binary())
        .arg("replay")
        .arg(dir)
        .arg("--out")
        .arg(&out)
        .stdout(std::process::Stdio::null())
        .status();
    let same = |name: &str| {
        std::fs::read(dir.join(name))
            .ok()
            .is_some_and(|a| Some(a) == std::fs::read(out.join(name)).ok())
    };
    let replay_ok =
        status.is_ok_and(|s| s.success()) && same("summary.csv") && same("validation.csv");
    verdict(
        "Availability accounting",
        avail_ok && replay_ok,
        format!(
            "availability {:.0} (291 +/- 1); replay summary.csv and validation.csv identical: {replay_ok}",
            s.availability
        ),
    )
}

fn load_sanity(run: &RunEvents) -> Verdict {
    let c = summarize(run).counts;
    let expected = FULL_RATE * FULL_WINDOW_S as f64;
    let total = c.total() as f64;
    let fail_frac = c.failed() as f64 / total.max(1.0);
    let pass = (total - expected).abs() <= ATTEMPTS_TOL * expected && fail_frac <= FAILURES_MAX;
    verdict(
        "Load-generator sanity",
        pass,
        format!(
            "{total} attempts (29000 +/- 1%), {} failed ({:.4}% <= 0.1%)",
            c.failed(),
            fail_frac * 100.0
        ),
    )
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |name: &str| tmp.path().join(name);
    let dirs: Vec<_> = [
        "ski-liveness",
        "fp-liveness",
        "dp-liveness",
        "dp-readiness",
        "fp-readiness",
        "backoff",
        "fp-latency",
        "ski-latency",
        "tolerate",
        "delayed",
        "no-fault",
    ]
    .map(dir)
    .into();

    let ski_live = liveness_run("ski", "ski-liveness", 5, 5.0, 1.0, 12.0);
    let fp_live = liveness_run("fp-liveness", "fp-liveness", 6, 5.0, 1.0, 12.0);
    let dp_live = liveness_run("dp", "dp-liveness", 6, 15.0, 3.0, 30.0);
    let dp_ready = readiness_run("dp", "dp-readiness", 3, 5.0, 30.0);
    let fp_ready = readiness_run("fp-readiness", "fp-readiness", 3, 5.0, 12.0);
    let backoff_cfg = backoff_run();
    let fp_latency = latency_run("fp-liveness", "fp-latency", false);
    let ski_latency = latency_run("ski", "ski-latency", true);
    let tolerate_cfg = dependency_run("tolerate", true);
    let delayed_cfg = dependency_run("delayed", false);
    let no_fault = no_fault_run();

    let (ski, fp, dp, dpr, fpr, bo, fpl, skl, tol, del, nf) = tokio::join!(
        run(&ski_live, &dirs[0]),
        run(&fp_live, &dirs[1]),
        run(&dp_live, &dirs[2]),
        run(&dp_ready, &dirs[3]),
        run(&fp_ready, &dirs[4]),
        run(&backoff_cfg, &dirs[5]),
        run(&fp_latency, &dirs[6]),
        run(&ski_latency, &dirs[7]),
        run(&tolerate_cfg, &dirs[8]),
        run(&delayed_cfg, &dirs[9]),
        run(&no_fault, &dirs[10]),
    );

    let mut verdicts = vec![model_suite()];
    verdicts.push(match &ski {
        Ok(s) => scm_failure(s),
        Err(e) => failed("SCM failure detection", e),
    });
    verdicts.push(match (&fp, &dp) {
        (Ok(f), Ok(d)) => pcm_failure(f, d),
        (Err(e), _) | (_, Err(e)) => failed("PCM failure detection", e),
    });
    verdicts.push(match (&ski, &fp, &dp) {
        (Ok(s), Ok(f), Ok(d)) => ordering(s, f, d),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => failed("SCM-vs-PCM ordering", e),
    });
    verdicts.push(match (&dpr, &fpr) {
        (Ok(d), Ok(f)) => readiness_recovery(d, f),
        (Err(e), _) | (_, Err(e)) => failed("Readiness recovery", e),
    });
    verdicts.push(match &fp {
        Ok(f) => grace_period(f),
        Err(e) => failed("Grace-period semantics", e),
    });
    verdicts.push(match &bo {
        Ok(b) => backoff(&b[0]),
        Err(e) => failed("Backoff", e),
    });
    verdicts.push(match (&fpl, &skl) {
        (Ok(f), Ok(s)) => erroneous_restart(&f[0], &s[0]),
        (Err(e), _) | (_, Err(e)) => failed("Erroneous-restart contrast", e),
    });
    verdicts.push(match (&tol, &del) {
        (Ok(t), Ok(d)) => tolerate_bug(&t[0], &d[0]),
        (Err(e), _) | (_, Err(e)) => failed("Tolerate-window restart bug", e),
    });
    verdicts.push(state_machine_oracle());
    verdicts.push(match &nf {
        Ok(n) => availability_and_replay(&n[0], &dir("no-fault")),
        Err(e) => failed("Availability accounting", e),
    });
    verdicts.push(match &nf {
        Ok(n) => load_sanity(&n[0]),
        Err(e) => failed("Load-generator sanity", e),
    });

    for v in &verdicts {
        println!(
            "{} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
    let failures: Vec<&str> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| v.name)
        .collect();
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
