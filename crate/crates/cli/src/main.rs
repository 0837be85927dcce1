//! `subopt`: run tabular experiments, analyze episode logs, aggregate gaps
//! across tasks, verify best episodes by replay, and draw charts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use subopt::aggregate::{AggregateReport, Variant, DEFAULT_EPSILON, DEFAULT_RESAMPLES};
use subopt::env::{EnvKind, EnvSpec};
use subopt::estimators::{best_single, replay_monte_carlo, replay_verify, EstimatorError};
use subopt::log_io::{read_log, write_atomic, write_log, LogHeader};
use subopt::report::svg::{aggregate_chart, curve_chart};
use subopt::report::{aggregate_tables, analyze_episodes, write_breakdown_csv, BootstrapKnobs, CurveTable, RunConfig};
use subopt::{run_experiment, EpisodeRecord, TrackerConfig};

#[derive(Parser)]
#[command(
    name = "subopt",
    version,
    about = "Measure how far a learned policy lags behind its own best experience"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config; write one JSONL log and one curve CSV per seed
    Run(RunArgs),
    /// Recompute curve tables from episode logs alone
    Analyze(AnalyzeArgs),
    /// Aggregate normalized gaps across tasks with a bootstrap confidence interval
    Aggregate(AggregateArgs),
    /// Replay a logged episode and check its recorded return
    Replay(ReplayArgs),
    /// Draw curve tables or aggregate reports as SVG
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Compress logs with gzip
    #[arg(long)]
    gzip: bool,
}

#[derive(Args)]
struct TrackerFlags {
    /// Recent window size
    #[arg(long)]
    recent_window: Option<usize>,
    /// Greedy evaluation window size
    #[arg(long)]
    eval_window: Option<usize>,
    /// Number of top episodes kept with full action sequences
    #[arg(long)]
    top_capacity: Option<usize>,
    /// Episodes averaged for the initial-policy value
    #[arg(long)]
    initial_episodes: Option<usize>,
    /// Top fraction used by the top-k estimators
    #[arg(long)]
    fraction: Option<f64>,
}

impl TrackerFlags {
    fn apply(&self, mut c: TrackerConfig) -> TrackerConfig {
        if let Some(v) = self.recent_window {
            c.recent_window = v;
        }
        if let Some(v) = self.eval_window {
            c.eval_window = v;
        }
        if let Some(v) = self.top_capacity {
            c.top_capacity = v;
        }
        if let Some(v) = self.initial_episodes {
            c.initial_episodes = v;
        }
        if let Some(v) = self.fraction {
            c.fraction = v;
        }
        c
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Episode logs (.jsonl or .jsonl.gz), one per seed
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Take eval_every and tracker knobs from this run config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training episodes between snapshots
    #[arg(long)]
    eval_every: Option<usize>,
    #[command(flatten)]
    tracker: TrackerFlags,
    /// Output CSV (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Task and its curve CSVs, as NAME=a.csv,b.csv (repeatable)
    #[arg(long = "task", required = true, value_parser = parse_task)]
    tasks: Vec<(String, Vec<PathBuf>)>,
    /// Expert estimate: ever or recent
    #[arg(long, default_value = "ever")]
    variant: Variant,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// Bootstrap RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denominator guard
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Per-run breakdown CSV
    #[arg(long)]
    breakdown: Option<PathBuf>,
    /// Report JSON
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<(String, Vec<PathBuf>), String> {
    let (name, files) = s.split_once('=').ok_or("expected NAME=a.csv,b.csv")?;
    if name.is_empty() || files.is_empty() {
        return Err("expected NAME=a.csv,b.csv".into());
    }
    Ok((name.to_string(), files.split(',').map(PathBuf::from).collect()))
}

#[derive(Args)]
struct ReplayArgs {
    /// Episode log
    log: PathBuf,
    /// `best` or an episode id
    #[arg(long, default_value = "best")]
    episode: String,
    /// Take the env spec from this run config
    #[arg(long, conflicts_with_all = ["env", "size"])]
    config: Option<PathBuf>,
    /// Environment name (deep_sea, key_corridor, dense_grid, mini_invaders)
    #[arg(long, requires = "size")]
    env: Option<EnvKind>,
    #[arg(long)]
    size: Option<usize>,
    /// Sticky-action probability
    #[arg(long)]
    slip: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Monte Carlo replays for a stochastic env
    #[arg(long, default_value_t = 100)]
    replays: usize,
    /// Seed for the Monte Carlo replays
    #[arg(long, default_value_t = 0)]
    mc_seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Curve CSVs, drawn together as one chart
    #[arg(long = "curve", num_args = 1.., conflicts_with = "reports")]
    curves: Vec<PathBuf>,
    /// Aggregate report JSONs, one bar each
    #[arg(long = "report", num_args = 1..)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "")]
    title: String,
    /// Output SVG (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Result of a command that completed but did not pass a check.
struct Failed;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

type Outcome = Result<std::result::Result<(), Failed>>;

/// Writes to `path` atomically, or to stdout.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, |f| Ok(f.write_all(bytes)?)).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_digest: String,
    algorithm_name: String,
    env_name: &'a str,
    eval_every: usize,
    tracker: TrackerConfig,
    runs: Vec<ManifestRun>,
}

#[derive(Serialize)]
struct ManifestRun {
    seed: u64,
    log: String,
    curve: String,
}

fn cmd_run(args: RunArgs) -> Outcome {
    let loaded = RunConfig::load(&args.config)?;
    let config = &loaded.config;
    let out_dir = args.output_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ext = if args.gzip { "jsonl.gz" } else { "jsonl" };

    let runs: Vec<ManifestRun> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<ManifestRun> {
            let (env, agent) = config.specs_for_seed(seed);
            let run = run_experiment(&env, &agent, config.schedule(), config.tracker, &loaded.bytes)
                .with_context(|| format!("seed {seed}"))?;
            let stem = config.run_stem(seed);
            let log = format!("{stem}.{ext}");
            let curve = format!("{stem}.csv");
            write_log(&out_dir.join(&log), &LogHeader::from(&run.identity), &run.episodes)?;
            let table = CurveTable::from_metrics(seed, &run.metrics);
            emit(Some(&out_dir.join(&curve)), table.to_csv_string().as_bytes())?;
            Ok(ManifestRun { seed, log, curve })
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        config_digest: loaded.digest(),
        algorithm_name: config.agent.algorithm_name(),
        env_name: config.env.name.as_str(),
        eval_every: config.eval_every,
        tracker: config.tracker,
        runs,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    emit(Some(&out_dir.join("manifest.json")), &json)?;
    emit(Some(&out_dir.join("config.toml")), &loaded.bytes)?;
    for r in &manifest.runs {
        println!(
            "seed {}: {} {}",
            r.seed,
            out_dir.join(&r.log).display(),
            out_dir.join(&r.curve).display()
        );
    }
    println!("config digest {}", manifest.config_digest);
    Ok(Ok(()))
}

fn cmd_analyze(args: AnalyzeArgs) -> Outcome {
    let (mut tracker, mut eval_every) = (TrackerConfig::default(), None);
    if let Some(path) = &args.config {
        let loaded = RunConfig::load(path)?;
        tracker = loaded.config.tracker;
        eval_every = Some(loaded.config.eval_every);
    }
    let tracker = args.tracker.apply(tracker);
    let eval_every = args
        .eval_every
        .or(eval_every)
        .ok_or_else(|| anyhow!("--eval-every is required without --config"))?;

    let mut tables = Vec::new();
    for path in &args.logs {
        let log = read_log(path).with_context(|| format!("reading {}", path.display()))?;
        let seed = log.header.as_ref().map_or(0, |h| h.seed);
        let metrics = analyze_episodes(&log.episodes, tracker, eval_every)
            .with_context(|| format!("analyzing {}", path.display()))?;
        tables.push(CurveTable::from_metrics(seed, &metrics));
    }
    let table = CurveTable::merge(tables);
    emit(args.out.as_deref(), table.to_csv_string().as_bytes())?;
    Ok(Ok(()))
}

fn read_table(path: &Path) -> Result<CurveTable> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    CurveTable::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn cmd_aggregate(args: AggregateArgs) -> Outcome {
    let mut grouped: BTreeMap<String, Vec<CurveTable>> = BTreeMap::new();
    for (name, files) in &args.tasks {
        for f in files {
            grouped.entry(name.clone()).or_default().push(read_table(f)?);
        }
    }
    let tasks: Vec<(String, CurveTable)> = grouped
        .into_iter()
        .map(|(name, tables)| (name, CurveTable::merge(tables)))
        .collect();
    let knobs = BootstrapKnobs {
        epsilon: args.epsilon,
        n_resamples: args.resamples,
        confidence: args.confidence,
        rng_seed: args.seed,
    };
    let (report, results) = aggregate_tables(&tasks, args.variant, knobs)?;

    if let Some(path) = &args.breakdown {
        let mut buf = Vec::new();
        write_breakdown_csv(&mut buf, &results, args.epsilon)?;
        emit(Some(path), &buf)?;
    }
    if let Some(path) = &args.report {
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        emit(Some(path), &json)?;
    }
    println!(
        "{} gap over {} tasks ({} seeds max): {:.6} [{:.6}, {:.6}] at {}% confidence",
        report.variant,
        report.n_tasks,
        report.n_seeds,
        report.point_estimate,
        report.ci_low,
        report.ci_high,
        report.confidence * 100.0,
    );
    if !report.invalid_tasks.is_empty() {
        println!("excluded tasks: {}", report.invalid_tasks.join(", "));
    }
    Ok(Ok(()))
}

fn replay_spec(args: &ReplayArgs, header: Option<&LogHeader>) -> Result<EnvSpec> {
    let spec = if let Some(path) = &args.config {
        let mut spec = RunConfig::load(path)?.config.env;
        if let Some(s) = args.slip {
            spec = spec.with_slip(s);
        }
        if let Some(m) = args.max_steps {
            spec = spec.with_max_steps(m);
        }
        spec
    } else {
        let name = match (args.env, header) {
            (Some(n), _) => n,
            (None, Some(h)) => h
                .env_name
                .parse()
                .map_err(|e| anyhow!("log env `{}`: {e}", h.env_name))?,
            (None, None) => bail!("give --env and --size, or --config"),
        };
        let size = args
            .size
            .ok_or_else(|| anyhow!("--size is required without --config"))?;
        let mut spec = EnvSpec::new(name, size).with_slip(args.slip.unwrap_or(0.0));
        if let Some(m) = args.max_steps {
            spec = spec.with_max_steps(m);
        }
        spec
    };
    if let Some(h) = header {
        if h.env_name != spec.name.as_str() {
            bail!("log was recorded on `{}` but replay was asked for `{}`", h.env_name, spec.name);
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn select_episode<'a>(episodes: &'a [EpisodeRecord], selector: &str) -> Result<&'a EpisodeRecord> {
    if selector == "best" {
        return Ok(best_single(episodes)?);
    }
    let id: u64 = selector
        .parse()
        .map_err(|_| anyhow!("episode selector must be `best` or an id, got `{selector}`"))?;
    episodes
        .iter()
        .find(|e| e.episode_id == id)
        .ok_or_else(|| anyhow!("no episode with id {id}"))
}

fn cmd_replay(args: ReplayArgs) -> Outcome {
    let log = read_log(&args.log).with_context(|| format!("reading {}", args.log.display()))?;
    let spec = replay_spec(&args, log.header.as_ref())?;
    let ep = select_episode(&log.episodes, &args.episode)?;

    if !spec.is_deterministic() {
        let s = replay_monte_carlo(&spec, ep, args.replays, args.mc_seed)?;
        println!(
            "episode {}: recorded {:?}; {} replays mean {:.6} std {:.6} min {:?} max {:?}",
            ep.episode_id, s.recorded, s.n, s.mean, s.std, s.min, s.max
        );
        return Ok(Ok(()));
    }
    match replay_verify(&spec, ep) {
        Ok(achieved) => {
            println!("PASS episode {}: replayed return {achieved:?}", ep.episode_id);
            Ok(Ok(()))
        }
        Err(EstimatorError::DeterminismViolation {
            recorded,
            achieved,
            step,
        }) => {
            let at = step.map_or_else(|| "end".to_string(), |s| format!("step {s}"));
            println!(
                "FAIL episode {}: recorded {recorded:?}, replayed {achieved:?}, diverged at {at}",
                ep.episode_id
            );
            Ok(Err(Failed))
        }
        Err(EstimatorError::EarlyTermination { step, recorded }) => {
            println!(
                "FAIL episode {}: env ended at step {step} of {recorded} recorded actions",
                ep.episode_id
            );
            Ok(Err(Failed))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_plot(args: PlotArgs) -> Outcome {
    let svg = if !args.curves.is_empty() {
        let tables = args.curves.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
        curve_chart(&CurveTable::merge(tables), &args.title)
    } else if !args.reports.is_empty() {
        let mut reports = Vec::new();
        for p in &args.reports {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let report: AggregateReport =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            reports.push((label, report));
        }
        aggregate_chart(&reports, &args.title)
    } else {
        bail!("give --curve or --report inputs");
    };
    let svg = svg.ok_or_else(|| anyhow!("empty input: nothing to plot"))?;
    emit(args.out.as_deref(), svg.as_bytes())?;
    Ok(Ok(()))
}
