//! `pqsched` command line.
//!
//! Every command writes CSV tables into `--out` and finishes by writing
//! `manifest.json`, which lists every file produced. Randomness derives from
//! `--seed` only: simulation path `i` uses seed `seed + i`, Brownian path `i`
//! uses stream `i` of `seed`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::cost::{normalize_by_oracle, replicate_with, write_summary_csv, ChargingRule, ReplicationSummary};
use crate::engine::{run_path_with, EngineError, EngineOptions, RateSchedule};
use crate::httheory::{
    bm_workload_paths, jnaive, jstar_general, jstar_quadratic, rank_models, workload_variance_rate, write_criteria_csv,
    HtError, QuadraticCostCoefficients, WorkloadMoments,
};
use crate::ingest::{estimate_confusion, estimate_rates, read_records, scores_by_class, IngestError, PredictionSource};
use crate::model::{validate_config, ConfusionMatrix, ModelError, SystemConfig};
use crate::policies::{PolicyError, PolicyKind, PolicyRef};
use crate::triage::{
    estimate_curves, optimize, write_decisions_csv, McParams, PassingCurve, ToxicityThreshold, TriageConfig,
    TriageError,
};

pub const THREADS_ENV: &str = "PQSCHED_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ht(#[from] HtError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "pqsched", version, about = "Scheduling and triage design with noisy job classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replicate the queue under one or more policies and report mean cost curves.
    Simulate(SimulateArgs),
    /// Monte-Carlo heavy-traffic costs under the optimal split and under Naive Gcμ.
    LowerBound(LowerBoundArgs),
    /// Rank candidate confusion matrices by relative regret.
    SelectModel(SelectModelArgs),
    /// Grid search over filtering level and toxicity threshold.
    Triage(TriageArgs),
    /// Estimate prevalences, confusion matrix, service moments and passing curves from labelled data.
    Estimate(EstimateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// System config JSON; an optional `schedule` key holds rate profiles.
    #[arg(long)]
    pub config: PathBuf,
    /// oracle, naive, pcmu, fcfs or all; repeatable.
    #[arg(long, default_values_t = vec!["all".to_string()])]
    pub policy: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points of the uniform reporting grid on [0, T].
    #[arg(long, default_value_t = 101)]
    pub grid_points: usize,
    #[arg(long, value_enum, default_value_t = Charging::Truncate)]
    pub charging: Charging,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Charging {
    Truncate,
    Completed,
}

impl From<Charging> for ChargingRule {
    fn from(c: Charging) -> Self {
        match c {
            Charging::Truncate => ChargingRule::TruncateAtHorizon,
            Charging::Completed => ChargingRule::CompletedOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct LowerBoundArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also evaluate the per-grid-point allocation on quadratic costs.
    #[arg(long)]
    pub general: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectModelArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// JSON files holding a confusion matrix (array of rows); named by file stem.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TriageArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `a:b:n`, n ≥ 1 points from a to b.
    #[arg(long, default_value = "0.05:0.48:44")]
    pub zfl_grid: String,
    #[arg(long, conflicts_with = "ztx_grid", default_value_t = 0.5)]
    pub ztx: f64,
    /// `a:b:n`; searches z_tx jointly instead of fixing it.
    #[arg(long)]
    pub ztx_grid: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Validation CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Predict class 1 iff score ≥ threshold; otherwise use predicted_class.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Laplace smoothing added to each confusion count.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed_schedule: String,
    pub grids: Value,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_secs: f64,
}

/// Parses `a:b:n` into `n` evenly spaced points.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("grid `{spec}` is not of the form a:b:n"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    match n {
        0 => Err(bad()),
        1 => Ok(vec![a]),
        _ => Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

/// Reads a system config, splitting off an optional `schedule` key.
pub fn load_system(path: &Path) -> Result<(SystemConfig, RateSchedule), CliError> {
    let mut value: Value = serde_json::from_str(&read_text(path)?)?;
    let schedule = match value.as_object_mut().and_then(|o| o.remove("schedule")) {
        Some(s) => serde_json::from_value(s)?,
        None => RateSchedule::default(),
    };
    let config = SystemConfig::from_json(&value.to_string())?;
    Ok((config, schedule))
}

fn parse_policies(names: &[String]) -> Result<Vec<PolicyKind>, CliError> {
    let mut out = Vec::new();
    for name in names {
        if name == "all" {
            out.extend(PolicyKind::ALL);
        } else {
            out.push(name.parse()?);
        }
    }
    let mut seen = Vec::new();
    out.retain(|k| {
        let fresh = !seen.contains(k);
        seen.push(*k);
        fresh
    });
    Ok(out)
}

/// Applies `PQSCHED_THREADS` to the global worker pool, once.
pub fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a count")))?;
        // A second call in the same process finds the pool already built; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<RunManifest, CliError> {
    configure_threads()?;
    let start = Instant::now();
    let (out_dir, mut manifest) = match &cli.command {
        Command::Simulate(a) => (&a.out, simulate(a)?),
        Command::LowerBound(a) => (&a.out, lower_bound(a)?),
        Command::SelectModel(a) => (&a.out, select_model(a)?),
        Command::Triage(a) => (&a.out, triage(a)?),
        Command::Estimate(a) => (&a.out, estimate(a)?),
    };
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    let path = out_dir.join("manifest.json");
    manifest.outputs.push(path.clone());
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|source| CliError::File { path: path.clone(), source })?;
    Ok(manifest)
}

fn manifest(command: &str, config: Option<&Path>, seed_schedule: String, grids: Value) -> RunManifest {
    RunManifest {
        command: command.into(),
        config: config.map(Path::to_path_buf),
        seed_schedule,
        grids,
        outputs: Vec::new(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_secs: 0.0,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::File { path: dir.to_path_buf(), source })
}

fn simulate(a: &SimulateArgs) -> Result<RunManifest, CliError> {
    let (config, schedule) = load_system(&a.config)?;
    let report = validate_config(&config)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if a.paths == 0 {
        return Err(CliError::Usage("--paths must be positive".into()));
    }
    ensure_dir(&a.out)?;
    let kinds = parse_policies(&a.policy)?;
    let options = EngineOptions { schedule, record_composition: false, ..Default::default() };
    let mut summaries: Vec<ReplicationSummary> = Vec::new();
    let mut m = manifest(
        "simulate",
        Some(&a.config),
        format!("path i uses seed {} + i for i < {}", a.seed, a.paths),
        serde_json::json!({ "report_grid_points": a.grid_points, "horizon": config.horizon }),
    );
    for kind in &kinds {
        let policy = PolicyRef::new(*kind, &config)?;
        summaries.push(replicate_with(&config, &policy, a.paths, a.seed, a.charging.into(), a.grid_points, &options)?);
        if a.paths == 1 {
            let path = run_path_with(&config, &policy, a.seed, a.grid_points, &options)?;
            let jobs = a.out.join(format!("jobs_{}.csv", kind.name()));
            path.write_jobs_csv(create(&jobs)?)?;
            let curves = a.out.join(format!("curves_{}.csv", kind.name()));
            path.write_curves_csv(create(&curves)?)?;
            m.outputs.extend([jobs, curves]);
        }
    }
    normalize_by_oracle(&mut summaries);
    let summary_path = a.out.join("summary.csv");
    write_summary_csv(&summaries, create(&summary_path)?)?;
    m.outputs.insert(0, summary_path);
    Ok(m)
}

#[derive(Serialize)]
struct LowerBoundRow {
    variance_rate: f64,
    n_paths: usize,
    n_steps: usize,
    mean_sq_integral: f64,
    jstar_mean: f64,
    jstar_stderr: f64,
    jnaive_mean: Option<f64>,
    jnaive_stderr: Option<f64>,
    jstar_general_mean: Option<f64>,
    max_fast_general_gap: Option<f64>,
}

fn lower_bound(a: &LowerBoundArgs) -> Result<RunManifest, CliError> {
    let (config, _) = load_system(&a.config)?;
    validate_config(&config)?;
    ensure_dir(&a.out)?;
    let v = workload_variance_rate(&config, &WorkloadMoments::from_config(&config))?;
    let paths = bm_workload_paths(v, a.steps, config.horizon, a.paths, a.seed)?;
    let ints: Vec<f64> = paths.iter().map(|p| p.integral_sq()).collect();
    let (mean_sq_integral, _) = crate::cost::mean_stderr(&ints);
    let mut m = manifest(
        "lower-bound",
        Some(&a.config),
        format!("Brownian path i uses stream i of seed {}", a.seed),
        serde_json::json!({ "steps": a.steps, "horizon": config.horizon }),
    );
    let row = if config.is_quadratic() {
        let coeffs = QuadraticCostCoefficients::new(&config)?;
        let fast = jstar_quadratic(&config, &paths)?;
        let naive = jnaive(&config, &paths)?;
        let (jstar_mean, jstar_stderr) = crate::cost::mean_stderr(&fast);
        let (jn_mean, jn_stderr) = crate::cost::mean_stderr(&naive);
        let (general_mean, gap) = if a.general {
            let general = jstar_general(&config, &paths)?;
            let gap = fast.iter().zip(&general).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            (Some(crate::cost::mean_stderr(&general).0), Some(gap))
        } else {
            (None, None)
        };
        let coeff_path = a.out.join("coefficients.csv");
        let mut w = csv::Writer::from_writer(create(&coeff_path)?);
        w.write_record(["class", "beta", "beta_naive"])?;
        for (l, (b, bn)) in coeffs.beta.iter().zip(&coeffs.beta_naive).enumerate() {
            w.write_record([(l + 1).to_string(), b.to_string(), bn.to_string()])?;
        }
        w.write_record(["jstar_coeff".into(), coeffs.jstar_coeff.to_string(), String::new()])?;
        w.write_record(["jnaive_coeff".into(), coeffs.jnaive_coeff.to_string(), String::new()])?;
        w.flush()?;
        m.outputs.push(coeff_path);
        LowerBoundRow {
            variance_rate: v,
            n_paths: a.paths,
            n_steps: a.steps,
            mean_sq_integral,
            jstar_mean,
            jstar_stderr,
            jnaive_mean: Some(jn_mean),
            jnaive_stderr: Some(jn_stderr),
            jstar_general_mean: general_mean,
            max_fast_general_gap: gap,
        }
    } else {
        let general = jstar_general(&config, &paths)?;
        let (jstar_mean, jstar_stderr) = crate::cost::mean_stderr(&general);
        LowerBoundRow {
            variance_rate: v,
            n_paths: a.paths,
            n_steps: a.steps,
            mean_sq_integral,
            jstar_mean,
            jstar_stderr,
            jnaive_mean: None,
            jnaive_stderr: None,
            jstar_general_mean: Some(jstar_mean),
            max_fast_general_gap: None,
        }
    };
    let path = a.out.join("lower_bound.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.serialize(row)?;
    w.flush()?;
    m.outputs.insert(0, path);
    Ok(m)
}

fn select_model(a: &SelectModelArgs) -> Result<RunManifest, CliError> {
    let (config, _) = load_system(&a.config)?;
    validate_config(&config)?;
    ensure_dir(&a.out)?;
    let mut candidates = Vec::new();
    for path in &a.models {
        let rows: Vec<Vec<f64>> = serde_json::from_str(&read_text(path)?)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        candidates.push((name, ConfusionMatrix::from_rows(rows)?));
    }
    let ranked = rank_models(&candidates, &config)?;
    let path = a.out.join("criteria.csv");
    write_criteria_csv(&ranked, create(&path)?)?;
    let mut m = manifest("select-model", Some(&a.config), "deterministic; no randomness".into(), Value::Null);
    m.outputs.push(path);
    Ok(m)
}

fn triage(a: &TriageArgs) -> Result<RunManifest, CliError> {
    let config = TriageConfig::from_json(&read_text(&a.config)?)?;
    ensure_dir(&a.out)?;
    let zfl = parse_grid(&a.zfl_grid)?;
    let ztx = match &a.ztx_grid {
        Some(g) => ToxicityThreshold::Grid(parse_grid(g)?),
        None => ToxicityThreshold::Fixed(a.ztx),
    };
    if zfl
        .iter()
        .chain(match &ztx {
            ToxicityThreshold::Grid(g) => g.iter(),
            ToxicityThreshold::Fixed(v) => std::slice::from_ref(v).iter(),
        })
        .any(|z| !(0.0..=1.0).contains(z))
    {
        return Err(CliError::Usage("thresholds must lie in [0, 1]".into()));
    }
    let mc = McParams { n_paths: a.paths, n_steps: a.steps, seed: a.seed };
    let result = optimize(&config, &ztx, &zfl, mc)?;
    let grid_path = a.out.join("triage.csv");
    write_decisions_csv(&result.evaluations, create(&grid_path)?)?;
    let best_path = a.out.join("triage_best.csv");
    write_decisions_csv(&[result.best], create(&best_path)?)?;
    let mut m = manifest(
        "triage",
        Some(&a.config),
        format!("one shared set of Brownian paths: stream i of seed {} for i < {}", a.seed, a.paths),
        serde_json::json!({ "z_fl": zfl, "z_tx": match &ztx {
            ToxicityThreshold::Grid(g) => g.clone(),
            ToxicityThreshold::Fixed(v) => vec![*v],
        }, "steps": a.steps }),
    );
    m.outputs.extend([grid_path, best_path]);
    Ok(m)
}

#[derive(Serialize)]
struct EstimateReport {
    records: usize,
    prevalences: Vec<f64>,
    confusion: Vec<Vec<f64>>,
    counts: Vec<Vec<f64>>,
    service_rates: Option<Vec<f64>>,
    service_second_moments: Option<Vec<f64>>,
}

fn estimate(a: &EstimateArgs) -> Result<RunManifest, CliError> {
    let file = File::open(&a.input).map_err(|source| CliError::File { path: a.input.clone(), source })?;
    let records = read_records(file, a.classes)?;
    ensure_dir(&a.out)?;
    let source = match a.threshold {
        Some(z) if a.classes == 2 => PredictionSource::Threshold(z),
        Some(_) => return Err(CliError::Usage("--threshold needs exactly 2 classes".into())),
        None if records.iter().all(|r| r.predicted_class.is_some()) => PredictionSource::Labels,
        None => return Err(IngestError::NoPredictions.into()),
    };
    let conf = estimate_confusion(&records, a.classes, source, a.alpha)?;
    let rates = if records.iter().all(|r| r.service_time.is_some()) {
        Some(estimate_rates(&records, a.classes)?)
    } else {
        None
    };
    let report = EstimateReport {
        records: records.len(),
        prevalences: conf.prevalences,
        confusion: conf.confusion.to_rows(),
        counts: conf.counts,
        service_rates: rates.as_ref().map(|r| r.service_rates.clone()),
        service_second_moments: rates.map(|r| r.second_moments),
    };
    let mut m = manifest("estimate", None, "deterministic; no randomness".into(), Value::Null);
    let est_path = a.out.join("estimate.json");
    fs::write(&est_path, serde_json::to_string_pretty(&report)?)
        .map_err(|source| CliError::File { path: est_path.clone(), source })?;
    m.outputs.push(est_path);

    let scores = scores_by_class(&records, a.classes);
    if a.classes == 2 && scores.iter().all(|s| !s.is_empty()) {
        let curves = estimate_curves(&[scores[0].clone(), scores[1].clone()])?;
        let path = a.out.join("passing_curves.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["z", "g_1", "g_2"])?;
        if let [PassingCurve::Tabulated { grid, values: g1 }, PassingCurve::Tabulated { values: g2, .. }] = &curves {
            for i in 0..grid.len() {
                w.write_record([grid[i].to_string(), g1[i].to_string(), g2[i].to_string()])?;
            }
        }
        w.flush()?;
        m.outputs.push(path);
    }
    m.grids = serde_json::json!({ "threshold": a.threshold, "alpha": a.alpha });
    Ok(m)
}
