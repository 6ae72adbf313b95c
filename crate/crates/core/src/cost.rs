//! Cumulative queueing cost of simulated paths, charged with true-class costs.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_path_with, EngineError, EngineOptions, PathResult};
use crate::model::SystemConfig;
use crate::policies::{PolicyKind, PolicyRef};

/// How jobs still present at the horizon are charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ChargingRule {
    /// Open jobs contribute nothing.
    CompletedOnly,
    /// Open jobs are charged `C_k(T - arrival)`.
    #[default]
    TruncateAtHorizon,
}

/// `J(t)` on a grid of times.
#[derive(Debug, Clone, PartialEq)]
pub struct CostCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub rule: ChargingRule,
}

impl CostCurve {
    pub fn last(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Cost charged against one job's arrival epoch.
fn job_charge(path: &PathResult, idx: usize, config: &SystemConfig, rule: ChargingRule) -> f64 {
    let job = &path.jobs[idx];
    let cost = &config.costs[job.true_class];
    match (job.sojourn(), rule) {
        (Some(s), _) => cost.value(s),
        (None, ChargingRule::CompletedOnly) => 0.0,
        (None, ChargingRule::TruncateAtHorizon) => cost.value(path.horizon - job.arrival_time),
    }
}

/// `J(t) = Σ_{arrival ≤ t} C_k(sojourn)` evaluated at each grid time.
pub fn path_cost_on(path: &PathResult, config: &SystemConfig, rule: ChargingRule, grid: &[f64]) -> CostCurve {
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    let mut next = 0;
    for &t in grid {
        while next < path.jobs.len() && path.jobs[next].arrival_time <= t {
            acc += job_charge(path, next, config, rule);
            next += 1;
        }
        values.push(acc);
    }
    CostCurve { grid: grid.to_vec(), values, rule }
}

/// Cost curve on the path's own sampling grid.
pub fn path_cost(path: &PathResult, config: &SystemConfig, rule: ChargingRule) -> CostCurve {
    path_cost_on(path, config, rule, &path.curves.times)
}

/// Total cost `J(T)`.
pub fn path_total(path: &PathResult, config: &SystemConfig, rule: ChargingRule) -> f64 {
    (0..path.jobs.len()).map(|i| job_charge(path, i, config, rule)).sum()
}

pub fn uniform_grid(horizon: f64, points: usize) -> Vec<f64> {
    let points = points.max(2);
    (0..points).map(|i| horizon * i as f64 / (points - 1) as f64).collect()
}

/// Mean and standard error (`sd / √n`) of a sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and standard error of `a_i - b_i`.
pub fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_stderr(&d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    pub policy: PolicyKind,
    pub n_paths: usize,
    pub base_seed: u64,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Mean cost relative to the oracle mean at each time, when known.
    pub ratio_to_oracle: Option<Vec<f64>>,
    /// `J(T)` of each path in seed order.
    pub finals: Vec<f64>,
}

impl ReplicationSummary {
    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }

    pub fn final_stderr(&self) -> f64 {
        self.stderr.last().copied().unwrap_or(0.0)
    }
}

/// Runs `n_paths` paths on seeds `base_seed + i` and aggregates `J(t)` on
/// `grid_points` uniform times. Paths run in parallel; aggregation follows
/// seed order.
pub fn replicate(
    config: &SystemConfig,
    policy: &PolicyRef,
    n_paths: usize,
    base_seed: u64,
    rule: ChargingRule,
    grid_points: usize,
) -> Result<ReplicationSummary, EngineError> {
    let options = EngineOptions { record_composition: false, ..Default::default() };
    replicate_with(config, policy, n_paths, base_seed, rule, grid_points, &options)
}

pub fn replicate_with(
    config: &SystemConfig,
    policy: &PolicyRef,
    n_paths: usize,
    base_seed: u64,
    rule: ChargingRule,
    grid_points: usize,
    options: &EngineOptions,
) -> Result<ReplicationSummary, EngineError> {
    let grid = uniform_grid(config.horizon, grid_points);
    let curves: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let path = run_path_with(config, policy, seed, 2, options)?;
            Ok(path_cost_on(&path, config, rule, &grid).values)
        })
        .collect::<Result<_, EngineError>>()?;
    let mut mean = Vec::with_capacity(grid.len());
    let mut stderr = Vec::with_capacity(grid.len());
    let mut column = vec![0.0; n_paths];
    for g in 0..grid.len() {
        for (slot, c) in column.iter_mut().zip(&curves) {
            *slot = c[g];
        }
        let (m, s) = mean_stderr(&column);
        mean.push(m);
        stderr.push(s);
    }
    let finals = curves.iter().map(|c| *c.last().unwrap()).collect();
    Ok(ReplicationSummary {
        policy: policy.kind(),
        n_paths,
        base_seed,
        times: grid,
        mean,
        stderr,
        ratio_to_oracle: None,
        finals,
    })
}

/// Fills `ratio_to_oracle` for every summary using the oracle summary in the
/// slice, if any. All summaries must share seeds and grid.
pub fn normalize_by_oracle(summaries: &mut [ReplicationSummary]) {
    let Some(oracle) = summaries.iter().find(|s| s.policy == PolicyKind::OracleGcmu).map(|s| s.mean.clone()) else {
        return;
    };
    for s in summaries.iter_mut() {
        s.ratio_to_oracle = Some(
            s.mean
                .iter()
                .zip(&oracle)
                .map(|(m, o)| {
                    if *o > 0.0 {
                        m / o
                    } else if *m == 0.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                })
                .collect(),
        );
    }
}

/// CSV with columns `policy,t,mean_cost,stderr,ratio_to_oracle`.
pub fn write_summary_csv<W: Write>(summaries: &[ReplicationSummary], out: W) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "t", "mean_cost", "stderr", "ratio_to_oracle"])?;
    for s in summaries {
        for (i, t) in s.times.iter().enumerate() {
            let ratio = s.ratio_to_oracle.as_ref().map(|r| r[i].to_string()).unwrap_or_default();
            w.write_record([
                s.policy.name().to_string(),
                t.to_string(),
                s.mean[i].to_string(),
                s.stderr[i].to_string(),
                ratio,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_path, TraceArrival};
    use crate::model::{ConfusionMatrix, CostFn, DistributionKind};

    fn config() -> SystemConfig {
        SystemConfig {
            lambda: 2.0,
            prevalences: vec![0.5, 0.5],
            service_rates: vec![4.0, 4.0],
            costs: vec![CostFn::quadratic(2.0), CostFn::quadratic(7.0)],
            confusion: ConfusionMatrix::identity(2),
            horizon: 10.0,
            arrival_dist: DistributionKind::Exponential,
            service_dist: DistributionKind::Exponential,
        }
    }

    fn trace_path(cfg: &SystemConfig, trace: Vec<TraceArrival>) -> PathResult {
        let pol = PolicyRef::new(PolicyKind::Pcmu, cfg).unwrap();
        let opts = EngineOptions { trace: Some(trace), ..Default::default() };
        run_path_with(cfg, &pol, 0, 11, &opts).unwrap()
    }

    #[test]
    fn empty_path_costs_nothing() {
        let mut cfg = config();
        cfg.lambda = 1e-12;
        let pol = PolicyRef::new(PolicyKind::Pcmu, &cfg).unwrap();
        let path = run_path(&cfg, &pol, 1, 5).unwrap();
        let curve = path_cost(&path, &cfg, ChargingRule::TruncateAtHorizon);
        assert!(curve.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_job_quadratic_charge() {
        let cfg = config();
        let path = trace_path(&cfg, vec![TraceArrival { time: 2.0, true_class: 0, predicted_class: 0, service: 3.0 }]);
        let curve = path_cost(&path, &cfg, ChargingRule::CompletedOnly);
        for (t, v) in curve.grid.iter().zip(&curve.values) {
            assert_eq!(*v, if *t >= 2.0 { 9.0 } else { 0.0 });
        }
    }

    #[test]
    fn misclassified_job_pays_true_cost() {
        let mut cfg = config();
        cfg.confusion = ConfusionMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let path = trace_path(&cfg, vec![TraceArrival { time: 0.0, true_class: 0, predicted_class: 1, service: 1.0 }]);
        assert_eq!(path_total(&path, &cfg, ChargingRule::CompletedOnly), cfg.costs[0].value(1.0));
    }

    #[test]
    fn open_jobs_follow_charging_rule() {
        let cfg = config();
        let path = trace_path(&cfg, vec![TraceArrival { time: 8.0, true_class: 1, predicted_class: 1, service: 5.0 }]);
        assert_eq!(path_total(&path, &cfg, ChargingRule::CompletedOnly), 0.0);
        assert_eq!(path_total(&path, &cfg, ChargingRule::TruncateAtHorizon), cfg.costs[1].value(2.0));
    }

    #[test]
    fn curves_are_monotone_and_start_at_zero() {
        let cfg = config();
        let pol = PolicyRef::new(PolicyKind::NaiveGcmu, &cfg).unwrap();
        for seed in 0..20 {
            let path = run_path(&cfg, &pol, seed, 101).unwrap();
            for rule in [ChargingRule::CompletedOnly, ChargingRule::TruncateAtHorizon] {
                let c = path_cost(&path, &cfg, rule);
                assert_eq!(c.values[0], 0.0);
                assert!(c.values.windows(2).all(|w| w[0] <= w[1]));
                let total = path_total(&path, &cfg, rule);
                assert!((c.last() - total).abs() <= 1e-9 * total.max(1.0));
            }
        }
    }

    #[test]
    fn identical_policies_give_identical_summaries() {
        let cfg = config();
        let pol = PolicyRef::new(PolicyKind::Pcmu, &cfg).unwrap();
        let a = replicate(&cfg, &pol, 16, 100, ChargingRule::TruncateAtHorizon, 5).unwrap();
        let b = replicate(&cfg, &pol, 16, 100, ChargingRule::TruncateAtHorizon, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_confusion_pcmu_matches_oracle_exactly() {
        let cfg = config();
        let p = PolicyRef::new(PolicyKind::Pcmu, &cfg).unwrap();
        let o = PolicyRef::new(PolicyKind::OracleGcmu, &cfg).unwrap();
        let a = replicate(&cfg, &p, 32, 7, ChargingRule::TruncateAtHorizon, 3).unwrap();
        let b = replicate(&cfg, &o, 32, 7, ChargingRule::TruncateAtHorizon, 3).unwrap();
        assert_eq!(a.finals, b.finals);
        assert_eq!(paired_difference(&a.finals, &b.finals), (0.0, 0.0));
    }

    #[test]
    fn stderr_scales_with_root_n() {
        let cfg = config();
        let pol = PolicyRef::new(PolicyKind::GlobalFcfs, &cfg).unwrap();
        let small = replicate(&cfg, &pol, 4000, 0, ChargingRule::TruncateAtHorizon, 2).unwrap();
        let large = replicate(&cfg, &pol, 8000, 50_000, ChargingRule::TruncateAtHorizon, 2).unwrap();
        let ratio = small.final_stderr() / large.final_stderr();
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn additivity_over_job_sets() {
        let cfg = config();
        let pol = PolicyRef::new(PolicyKind::Pcmu, &cfg).unwrap();
        let path = run_path(&cfg, &pol, 9, 2).unwrap();
        let total = path_total(&path, &cfg, ChargingRule::TruncateAtHorizon);
        let by_class: f64 = (0..2)
            .map(|k| {
                (0..path.jobs.len())
                    .filter(|&i| path.jobs[i].true_class == k)
                    .map(|i| job_charge(&path, i, &cfg, ChargingRule::TruncateAtHorizon))
                    .sum::<f64>()
            })
            .sum();
        assert!((total - by_class).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn summary_csv_layout() {
        let cfg = config();
        let mut sums: Vec<_> = [PolicyKind::OracleGcmu, PolicyKind::Pcmu]
            .iter()
            .map(|k| {
                replicate(&cfg, &PolicyRef::new(*k, &cfg).unwrap(), 4, 0, ChargingRule::TruncateAtHorizon, 3).unwrap()
            })
            .collect();
        normalize_by_oracle(&mut sums);
        let mut buf = Vec::new();
        write_summary_csv(&sums, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("policy,t,mean_cost,stderr,ratio_to_oracle"));
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("oracle,10,"));
    }
}
