//! Design of an AI-assisted review queue: which content to filter out, how
//! many reviewers to hire, and what each reviewer's queue costs.
//!
//! Class 0 is toxic, class 1 is non-toxic. Content scoring below `z_fl` is
//! filtered; the rest is routed uniformly to `Γ(z_fl)` reviewers, and each
//! reviewer prioritizes jobs predicted toxic (`score ≥ z_tx`) by Pcμ.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{mean_stderr, replicate, ChargingRule};
use crate::engine::EngineError;
use crate::httheory::{bm_workload_sq_integrals, workload_variance_rate, HtError, WorkloadMoments};
use crate::model::{ConfusionMatrix, CostFn, DistributionKind, ModelError, SystemConfig};
use crate::policies::{PolicyKind, PolicyRef};

pub const DEFAULT_SCORE_GRID: usize = 101;

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("no content passes the filter at z_fl = {0}")]
    EmptyPass(f64),
    #[error("no admissible (z_fl, z_tx) pair in the grid")]
    EmptyGrid,
    #[error("class {0} has no validation scores")]
    EmptyClass(usize),
    #[error("invalid passing curve: {0}")]
    BadCurve(String),
    #[error("invalid triage config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ht(#[from] HtError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `g(z) = P[score ≥ z | class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PassingCurve {
    /// Piecewise-linear through `(grid[i], values[i])`; `grid` spans `[0, 1]`.
    Tabulated { grid: Vec<f64>, values: Vec<f64> },
    /// The logit of the score is logistic with the given location and scale.
    Logistic { location: f64, scale: f64 },
}

impl PassingCurve {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            PassingCurve::Tabulated { grid, values } => {
                if z <= grid[0] {
                    return values[0];
                }
                let last = grid.len() - 1;
                if z >= grid[last] {
                    return values[last];
                }
                let i = grid.partition_point(|&g| g <= z) - 1;
                let w = (z - grid[i]) / (grid[i + 1] - grid[i]);
                values[i] + w * (values[i + 1] - values[i])
            }
            PassingCurve::Logistic { location, scale } => {
                if z <= 0.0 {
                    return 1.0;
                }
                if z >= 1.0 {
                    return 0.0;
                }
                let logit = (z / (1.0 - z)).ln();
                1.0 / (1.0 + ((logit - location) / scale).exp())
            }
        }
    }

    pub fn validate(&self) -> Result<(), TriageError> {
        match self {
            PassingCurve::Tabulated { grid, values } => {
                if grid.len() < 2 || grid.len() != values.len() {
                    return Err(TriageError::BadCurve("grid and values need equal length ≥ 2".into()));
                }
                if grid[0] != 0.0 || grid[grid.len() - 1] != 1.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(TriageError::BadCurve("grid must increase strictly from 0 to 1".into()));
                }
                if values[0] != 1.0 {
                    return Err(TriageError::BadCurve("g(0) must be 1".into()));
                }
                if values.iter().any(|v| !(0.0..=1.0).contains(v)) || values.windows(2).any(|w| w[1] > w[0]) {
                    return Err(TriageError::BadCurve("values must be nonincreasing in [0, 1]".into()));
                }
                Ok(())
            }
            PassingCurve::Logistic { location, scale } => {
                if !location.is_finite() || !(*scale > 0.0) {
                    return Err(TriageError::BadCurve("logistic needs finite location and positive scale".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationCosts {
    pub c_fp: f64,
    pub c_fn: f64,
    pub c_tp: f64,
    pub c_tn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig {
    /// Total content arrival rate `Λ`.
    pub total_rate: f64,
    pub prevalences: [f64; 2],
    pub service_rates: [f64; 2],
    pub curves: [PassingCurve; 2],
    /// Cost per filtered toxic item, `> 0`.
    pub c_trp: f64,
    /// Cost per filtered non-toxic item, `< 0`.
    pub c_trn: f64,
    pub misclassification: MisclassificationCosts,
    /// Hiring cost per reviewer per unit time.
    pub c_r: f64,
    /// Quadratic delay coefficients `C_k(t) = c_k t²/2`.
    pub delay_costs: [f64; 2],
    #[serde(default)]
    pub arrival_dist: DistributionKind,
    #[serde(default)]
    pub service_dist: DistributionKind,
}

impl TriageConfig {
    pub fn validate(&self) -> Result<(), TriageError> {
        let bad = |m: &str| Err(TriageError::Invalid(m.into()));
        if !(self.total_rate > 0.0) {
            return bad("total_rate must be positive");
        }
        if self.prevalences.iter().any(|p| !(*p >= 0.0)) || (self.prevalences.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("prevalences must be a probability vector");
        }
        if self.service_rates.iter().any(|m| !(*m > 0.0)) {
            return bad("service rates must be positive");
        }
        if !(self.c_trp > 0.0) || !(self.c_trn < 0.0) {
            return bad("filtering costs need c_trp > 0 and c_trn < 0");
        }
        if !(self.c_r > 0.0) {
            return bad("c_r must be positive");
        }
        if self.delay_costs.iter().any(|c| !(*c > 0.0)) {
            return bad("delay coefficients must be positive");
        }
        for c in &self.curves {
            c.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TriageError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TriageError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn passing(&self, z: f64) -> [f64; 2] {
        [self.curves[0].eval(z), self.curves[1].eval(z)]
    }
}

/// `Γ(z_fl) = Λ Σ_k p_k g_k(z_fl)/μ_k`.
pub fn staffing(z_fl: f64, config: &TriageConfig) -> f64 {
    let g = config.passing(z_fl);
    config.total_rate * (0..2).map(|k| config.prevalences[k] * g[k] / config.service_rates[k]).sum::<f64>()
}

/// Primitives of a single reviewer's queue.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewerParams {
    pub gamma: f64,
    pub lambda_r: f64,
    /// Class mix among passed content.
    pub prevalences: [f64; 2],
    /// Row `k`: probability a passed class-`k` item is predicted toxic / non-toxic.
    pub confusion: [[f64; 2]; 2],
    /// Interarrival SCV seen by one reviewer after filtering and routing.
    pub arrival_scv: f64,
}

impl ReviewerParams {
    /// The reviewer's queue as a model config over `[0, horizon]`.
    pub fn system_config(&self, config: &TriageConfig, horizon: f64) -> SystemConfig {
        let arrival_dist = if matches!(config.arrival_dist, DistributionKind::Exponential) {
            DistributionKind::Exponential
        } else {
            DistributionKind::Lognormal { scv: self.arrival_scv }
        };
        SystemConfig {
            lambda: self.lambda_r,
            prevalences: self.prevalences.to_vec(),
            service_rates: config.service_rates.to_vec(),
            costs: config.delay_costs.iter().map(|&c| CostFn::quadratic(c)).collect(),
            confusion: ConfusionMatrix::from_rows(self.confusion.iter().map(|r| r.to_vec()).collect())
                .expect("rows of a triage confusion matrix are stochastic"),
            horizon,
            arrival_dist,
            service_dist: config.service_dist,
        }
    }

    /// Net-input variance rate of one reviewer's workload.
    pub fn variance_rate(&self, config: &TriageConfig) -> Result<f64, TriageError> {
        let cfg = self.system_config(config, 1.0);
        let moments = WorkloadMoments {
            interarrival: (1.0 + self.arrival_scv) / self.lambda_r.powi(2),
            service: config.service_rates.iter().map(|&mu| config.service_dist.second_moment(mu)).collect(),
        };
        Ok(workload_variance_rate(&cfg, &moments)?)
    }
}

pub fn reviewer_params(z_fl: f64, z_tx: f64, config: &TriageConfig) -> Result<ReviewerParams, TriageError> {
    let g_fl = config.passing(z_fl);
    let g_tx = config.passing(z_tx);
    let pass: f64 = (0..2).map(|k| config.prevalences[k] * g_fl[k]).sum();
    if !(pass > 0.0) {
        return Err(TriageError::EmptyPass(z_fl));
    }
    let gamma = staffing(z_fl, config);
    let lambda_r = config.total_rate * pass / gamma;
    let prevalences = [config.prevalences[0] * g_fl[0] / pass, config.prevalences[1] * g_fl[1] / pass];
    let mut confusion = [[1.0, 0.0]; 2];
    for k in 0..2 {
        if g_fl[k] > 0.0 {
            let q = (g_tx[k] / g_fl[k]).clamp(0.0, 1.0);
            confusion[k] = [q, 1.0 - q];
        }
    }
    let thin = lambda_r / config.total_rate;
    let base_scv = config.arrival_dist.scv();
    Ok(ReviewerParams { gamma, lambda_r, prevalences, confusion, arrival_scv: thin * base_scv + 1.0 - thin })
}

/// `Λ[c_trp p_1(1−g_1) + c_trn p_2(1−g_2)]`.
pub fn filtering_cost_rate(z_fl: f64, config: &TriageConfig) -> f64 {
    let g = config.passing(z_fl);
    let p = config.prevalences;
    config.total_rate * (config.c_trp * p[0] * (1.0 - g[0]) + config.c_trn * p[1] * (1.0 - g[1]))
}

/// `Λ[p_1 g_1 (c_tp q_11 + c_fn q_12) + p_2 g_2 (c_fp q_21 + c_tn q_22)]`.
pub fn misclass_cost_rate(z_fl: f64, z_tx: f64, config: &TriageConfig) -> f64 {
    let g = config.passing(z_fl);
    let gt = config.passing(z_tx);
    let m = config.misclassification;
    let p = config.prevalences;
    // p_k g_k q_k1 = p_k g_k(z_tx); written this way it stays defined when g_k(z_fl) = 0.
    let toxic = p[0] * (m.c_tp * gt[0].min(g[0]) + m.c_fn * (g[0] - gt[0]).max(0.0));
    let safe = p[1] * (m.c_fp * gt[1].min(g[1]) + m.c_tn * (g[1] - gt[1]).max(0.0));
    config.total_rate * (toxic + safe)
}

/// `1/Σ_l β_l⁻¹` over predicted classes that receive jobs.
pub fn reviewer_jstar_coeff(params: &ReviewerParams, config: &TriageConfig) -> f64 {
    let mut inv_sum = 0.0;
    for l in 0..2 {
        let (mut mass, mut load, mut cost) = (0.0, 0.0, 0.0);
        for k in 0..2 {
            let m = params.lambda_r * params.prevalences[k] * params.confusion[k][l];
            mass += m;
            load += m / config.service_rates[k];
            cost += m * config.delay_costs[k];
        }
        if mass > 0.0 {
            // β_l = μ̃_l c̃_l / ρ̃_l = (λ̃_l c̃_l) / ρ̃_l²
            inv_sum += load * load / cost;
        }
    }
    if inv_sum > 0.0 {
        1.0 / inv_sum
    } else {
        0.0
    }
}

/// Monte-Carlo settings for the reflected Brownian workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McParams {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for McParams {
    fn default() -> Self {
        Self { n_paths: 10_000, n_steps: 1_000, seed: 0 }
    }
}

/// Standard reflected-BM sample shared across designs. `∫₀¹ W²` scales
/// linearly in the variance rate, so one unit-variance sample serves every z.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmSample {
    pub mean_sq_integral: f64,
    pub stderr_sq_integral: f64,
}

impl RbmSample {
    pub fn draw(mc: McParams) -> Result<Self, TriageError> {
        let ints = bm_workload_sq_integrals(1.0, mc.n_steps, 1.0, mc.n_paths, mc.seed)?;
        let (mean_sq_integral, stderr_sq_integral) = mean_stderr(&ints);
        Ok(Self { mean_sq_integral, stderr_sq_integral })
    }
}

/// Mean per-reviewer limiting queue cost at `t = 1`.
pub fn reviewer_queue_cost(z_fl: f64, z_tx: f64, config: &TriageConfig, rbm: &RbmSample) -> Result<f64, TriageError> {
    let params = reviewer_params(z_fl, z_tx, config)?;
    let v = params.variance_rate(config)?;
    Ok(reviewer_jstar_coeff(&params, config) * 0.5 * v * rbm.mean_sq_integral)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub filtering: f64,
    pub hiring: f64,
    pub misclassification: f64,
    pub queueing: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TriageDecision {
    pub z_fl: f64,
    pub z_tx: f64,
    pub gamma: f64,
    pub costs: CostBreakdown,
}

/// Total cost at `t = 1` of the design `(z_fl, z_tx)`.
pub fn total_cost(z_fl: f64, z_tx: f64, config: &TriageConfig, rbm: &RbmSample) -> Result<TriageDecision, TriageError> {
    if z_tx < z_fl {
        return Err(TriageError::Invalid(format!("z_tx = {z_tx} is below z_fl = {z_fl}")));
    }
    let filtering = filtering_cost_rate(z_fl, config);
    let (gamma, hiring, misclassification, queueing) = match reviewer_params(z_fl, z_tx, config) {
        Ok(params) => {
            let per = reviewer_queue_cost(z_fl, z_tx, config, rbm)?;
            (params.gamma, config.c_r * params.gamma, misclass_cost_rate(z_fl, z_tx, config), params.gamma * per)
        }
        Err(TriageError::EmptyPass(_)) => (0.0, 0.0, 0.0, 0.0),
        Err(e) => return Err(e),
    };
    let total = filtering + hiring + misclassification + queueing;
    Ok(TriageDecision {
        z_fl,
        z_tx,
        gamma,
        costs: CostBreakdown { filtering, hiring, misclassification, queueing, total },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToxicityThreshold {
    Fixed(f64),
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriageOptimum {
    pub evaluations: Vec<TriageDecision>,
    pub best: TriageDecision,
}

/// Exhaustive grid search with one shared RBM sample. Ties go to the smaller
/// `z_fl`, then the smaller `z_tx`.
pub fn optimize(
    config: &TriageConfig,
    z_tx: &ToxicityThreshold,
    zfl_grid: &[f64],
    mc: McParams,
) -> Result<TriageOptimum, TriageError> {
    let tx: Vec<f64> = match z_tx {
        ToxicityThreshold::Fixed(v) => vec![*v],
        ToxicityThreshold::Grid(g) => g.clone(),
    };
    let pairs: Vec<(f64, f64)> =
        zfl_grid.iter().flat_map(|&fl| tx.iter().filter(move |&&t| t >= fl).map(move |&t| (fl, t))).collect();
    if pairs.is_empty() {
        return Err(TriageError::EmptyGrid);
    }
    let rbm = RbmSample::draw(mc)?;
    let evaluations =
        pairs.par_iter().map(|&(fl, t)| total_cost(fl, t, config, &rbm)).collect::<Result<Vec<_>, _>>()?;
    let best = *evaluations
        .iter()
        .min_by(|a, b| {
            a.costs.total.total_cmp(&b.costs.total).then(a.z_fl.total_cmp(&b.z_fl)).then(a.z_tx.total_cmp(&b.z_tx))
        })
        .unwrap();
    Ok(TriageOptimum { evaluations, best })
}

/// Empirical passing curves from validation scores, sampled on a uniform
/// grid of [`DEFAULT_SCORE_GRID`] points.
pub fn estimate_curves(scores: &[Vec<f64>; 2]) -> Result<[PassingCurve; 2], TriageError> {
    let grid: Vec<f64> = (0..DEFAULT_SCORE_GRID).map(|i| i as f64 / (DEFAULT_SCORE_GRID - 1) as f64).collect();
    let one = |k: usize| -> Result<PassingCurve, TriageError> {
        let mut s = scores[k].clone();
        if s.is_empty() {
            return Err(TriageError::EmptyClass(k));
        }
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mut values: Vec<f64> = grid.iter().map(|&z| (s.len() - s.partition_point(|&x| x < z)) as f64 / n).collect();
        values[0] = 1.0;
        Ok(PassingCurve::Tabulated { grid: grid.clone(), values })
    };
    Ok([one(0)?, one(1)?])
}

/// DES estimate of one reviewer's Pcμ queue next to the RBM prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReviewerCheck {
    pub gamma: f64,
    pub gamma_rounded: f64,
    /// Reviewer load if `Γ` were rounded to an integer.
    pub rho_rounded: f64,
    pub lambda_r: f64,
    pub horizon: f64,
    pub des_mean: f64,
    pub des_stderr: f64,
    pub rbm_mean: f64,
}

/// Simulates one reviewer at exactly `λ_r` (load 1) over `[0, horizon]` and
/// compares the mean cost with `coeff · v · T²/4`.
pub fn reviewer_des_check(
    z_fl: f64,
    z_tx: f64,
    config: &TriageConfig,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ReviewerCheck, TriageError> {
    let params = reviewer_params(z_fl, z_tx, config)?;
    let sys = params.system_config(config, horizon);
    let policy = PolicyRef::new(PolicyKind::Pcmu, &sys).map_err(|e| TriageError::Invalid(e.to_string()))?;
    let summary = replicate(&sys, &policy, n_paths, seed, ChargingRule::TruncateAtHorizon, 2)?;
    let v = params.variance_rate(config)?;
    let rbm_mean = reviewer_jstar_coeff(&params, config) * v * horizon * horizon / 4.0;
    let gamma_rounded = params.gamma.round().max(1.0);
    Ok(ReviewerCheck {
        gamma: params.gamma,
        gamma_rounded,
        rho_rounded: params.gamma / gamma_rounded,
        lambda_r: params.lambda_r,
        horizon,
        des_mean: summary.final_mean(),
        des_stderr: summary.final_stderr(),
        rbm_mean,
    })
}

/// CSV with columns `z_fl,z_tx,filtering,hiring,misclass,queueing,total`.
pub fn write_decisions_csv<W: Write>(rows: &[TriageDecision], out: W) -> Result<(), TriageError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["z_fl", "z_tx", "filtering", "hiring", "misclass", "queueing", "total"])?;
    for r in rows {
        let c = r.costs;
        w.write_record(
            [r.z_fl, r.z_tx, c.filtering, c.hiring, c.misclassification, c.queueing, c.total].map(|x| x.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}
