use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{ArgGroup, CommandFactory, Parser, Subcommand};
use sentinel::config::RunConfig;
use sentinel::harness::experiment::{resolve_mock_binary, run_experiment, RunOptions};
use sentinel::harness::metrics::{load_runs, write_artifacts};
use sentinel::model;

#[derive(Parser)]
#[command(
    name = "sentinel",
    version,
    about = "Supervise mock services and measure how fast monitoring notices failures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a bundled preset.
    Run {
        /// Config path, or one of: dp, fp-readiness, fp-liveness, ski.
        config: String,
        /// Use the unscaled timings (hours of runtime).
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "SENTINEL_RUNDIR")]
        rundir: Option<PathBuf>,
        #[arg(long)]
        repetitions: Option<u32>,
        /// Measurement window in seconds.
        #[arg(long)]
        window: Option<u64>,
        #[arg(long)]
        mock_binary: Option<PathBuf>,
    },
    /// Check a config or preset and print it in normalized form.
    Validate {
        config: String,
        #[arg(long)]
        paper_scale: bool,
    },
    /// Evaluate a detection-time model.
    #[command(group(ArgGroup::new("which").required(true).args(["pcm_liveness", "scm_liveness", "pcm_readiness", "scm_readiness"])))]
    Model {
        #[arg(long)]
        pcm_liveness: bool,
        #[arg(long)]
        scm_liveness: bool,
        #[arg(long)]
        pcm_readiness: bool,
        #[arg(long)]
        scm_readiness: bool,
        /// Consecutive probe results required.
        #[arg(short = 'N')]
        n: Option<u32>,
        /// Probe interval, seconds.
        #[arg(short = 'I')]
        interval: Option<f64>,
        /// Probe or signal latency, seconds.
        #[arg(short = 'L')]
        latency: Option<f64>,
        /// Time for the container to become ready, seconds.
        #[arg(long = "tc")]
        container_ready: Option<f64>,
        /// Time of the first readiness probe, seconds.
        #[arg(long = "tr")]
        first_probe: Option<f64>,
        /// Time monitoring starts, seconds.
        #[arg(long = "ts")]
        monitor_start: Option<f64>,
    },
    /// Recompute the CSV artifacts from stored event logs.
    Replay {
        /// A run directory or a single events.ndjson.
        path: PathBuf,
        /// Where to write the CSVs; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require<T>(value: Option<T>, flag: &str) -> T {
    match value {
        Some(v) => v,
        None => Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                format!("this model needs {flag}"),
            )
            .exit(),
    }
}

fn print_prediction(name: &str, value: f64) {
    let rounded = (value * 1e6).round() / 1e6;
    println!("{name}\t{rounded}");
}

fn cmd_model(cmd: Command) -> anyhow::Result<()> {
    let Command::Model {
        pcm_liveness,
        scm_liveness,
        pcm_readiness,
        scm_readiness,
        n,
        interval,
        latency,
        container_ready,
        first_probe,
        monitor_start,
    } = cmd
    else {
        unreachable!()
    };
    if pcm_liveness {
        let t = model::predict_failure_pcm(
            require(n, "-N"),
            require(interval, "-I"),
            require(latency, "-L"),
        )?;
        print_prediction("failure_detection_pcm", t);
    }
    if scm_liveness {
        let t = model::predict_failure_scm(require(latency, "-L"))?;
        print_prediction("failure_detection_scm", t);
    }
    if pcm_readiness {
        let t = model::predict_readiness_pcm(
            require(container_ready, "--tc"),
            require(first_probe, "--tr"),
            require(n, "-N"),
            require(interval, "-I"),
            require(latency, "-L"),
        )?;
        print_prediction("readiness_detection_pcm", t);
    }
    if scm_readiness {
        let t = model::predict_readiness_scm(
            require(container_ready, "--tc"),
            require(monitor_start, "--ts"),
            require(latency, "-L"),
        )?;
        print_prediction("readiness_detection_scm", t);
    }
    Ok(())
}

fn default_rundir(cfg: &RunConfig) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{}-{stamp}", cfg.experiment.name))
}

async fn cmd_run(
    config: &str,
    paper_scale: bool,
    seed: u64,
    rundir: Option<PathBuf>,
    repetitions: Option<u32>,
    window: Option<u64>,
    mock_binary: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(r) = repetitions {
        cfg.experiment.repetitions = r;
    }
    if let Some(w) = window {
        cfg.experiment.window = Duration::from_secs(w);
    }
    cfg.validate()?;
    let rundir = rundir
        .or_else(|| cfg.rundir.clone())
        .unwrap_or_else(|| default_rundir(&cfg));
    let mock_binary = resolve_mock_binary(mock_binary.as_deref().or(cfg.mock_binary.as_deref()));
    let opts = RunOptions {
        rundir: rundir.clone(),
        seed,
        mock_binary,
    };
    let report = run_experiment(&cfg, &opts).await?;
    println!("{}", rundir.display());
    if !report.aborted.is_empty() {
        for (rep, reason) in &report.aborted {
            eprintln!("repetition {rep} aborted: {reason}");
        }
        bail!(
            "{} of {} repetitions aborted",
            report.aborted.len(),
            cfg.experiment.repetitions
        );
    }
    Ok(())
}

fn cmd_replay(path: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let out = out.unwrap_or_else(|| {
        if path.is_file() {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            path.to_path_buf()
        }
    });
    let runs = load_runs(path)?;
    write_artifacts(&runs, &out)?;
    let summary = out.join("summary.csv");
    let text = std::fs::read_to_string(&summary)
        .with_context(|| format!("reading {}", summary.display()))?;
    print!("{text}");
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            paper_scale,
            seed,
            rundir,
            repetitions,
            window,
            mock_binary,
        } => {
            cmd_run(
                &config,
                paper_scale,
                seed,
                rundir,
                repetitions,
                window,
                mock_binary,
            )
            .await
        }
        Command::Validate {
            config,
            paper_scale,
        } => RunConfig::load(&config)
            .and_then(|mut c| {
                if paper_scale {
                    c.apply_paper_scale();
                }
                c.to_toml()
            })
            .map(|text| print!("{text}"))
            .map_err(Into::into),
        Command::Replay { path, out } => cmd_replay(&path, out),
        cmd @ Command::Model { .. } => cmd_model(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
