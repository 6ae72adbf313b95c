//! Heavy-traffic limits: reflected Brownian workload, the optimal workload
//! split `h(r)`, and the limiting cumulative costs under Pcμ and Naive Gcμ.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    derive_predicted_params, mixture_cost, ConfusionMatrix, MixtureCost, ModelError, PredictedClassParams, SystemConfig,
};

pub const MIN_BM_STEPS: usize = 100;
const BISECTION_CAP: usize = 200;

#[derive(Debug, Error)]
pub enum HtError {
    #[error("moment {0} is not finite")]
    NonFiniteMoment(&'static str),
    #[error("g(r) does not reach r = {r}; cost derivatives are not invertible")]
    BracketFailure { r: f64 },
    #[error("operation requires quadratic costs")]
    NonQuadratic,
    #[error("expected {expected} classes, got {got}")]
    ClassCount { expected: usize, got: usize },
    #[error("need at least {MIN_BM_STEPS} steps, got {0}")]
    TooFewSteps(usize),
    #[error("negative workload level {0}")]
    NegativeWorkload(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A sampled path and its one-sided reflection at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedPath {
    pub times: Vec<f64>,
    pub raw: Vec<f64>,
    pub reflected: Vec<f64>,
}

impl ReflectedPath {
    /// Left Riemann sum of `∫ W²` over the grid.
    pub fn integral_sq(&self) -> f64 {
        left_riemann(&self.times, &self.reflected, |w| w * w)
    }
}

fn left_riemann(times: &[f64], values: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    times.windows(2).zip(values).map(|(t, &v)| (t[1] - t[0]) * f(v)).sum()
}

/// `φ(x)(t_i) = x(t_i) − min(0, min_{j≤i} x(t_j))`.
pub fn reflect(times: &[f64], values: &[f64]) -> ReflectedPath {
    assert_eq!(times.len(), values.len(), "grid and values must align");
    let mut running_min = 0.0f64;
    let reflected = values
        .iter()
        .map(|&x| {
            running_min = running_min.min(x);
            x - running_min
        })
        .collect();
    ReflectedPath { times: times.to_vec(), raw: values.to_vec(), reflected }
}

/// Second moments of interarrival and per-class service times.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadMoments {
    /// `α_u = E[u²]` for interarrival times with mean `1/λ`.
    pub interarrival: f64,
    /// `α_{v,k} = E[v_k²]` for class-`k` service with mean `1/μ_k`.
    pub service: Vec<f64>,
}

impl WorkloadMoments {
    pub fn from_config(config: &SystemConfig) -> Self {
        Self {
            interarrival: config.arrival_dist.second_moment(config.lambda),
            service: config.service_rates.iter().map(|&mu| config.service_dist.second_moment(mu)).collect(),
        }
    }
}

/// Variance per unit time of the net-input Brownian motion driving the
/// limiting workload.
pub fn workload_variance_rate(config: &SystemConfig, moments: &WorkloadMoments) -> Result<f64, HtError> {
    if !moments.interarrival.is_finite() {
        return Err(HtError::NonFiniteMoment("interarrival"));
    }
    if moments.service.iter().any(|m| !m.is_finite()) {
        return Err(HtError::NonFiniteMoment("service"));
    }
    let k = config.num_classes();
    if moments.service.len() != k {
        return Err(HtError::ClassCount { expected: k, got: moments.service.len() });
    }
    let lambda = config.lambda;
    let mean: f64 = config.prevalences.iter().zip(&config.service_rates).map(|(p, mu)| p / mu).sum();
    let second: f64 = config.prevalences.iter().zip(&moments.service).map(|(p, a)| p * a).sum();
    let c_v = second - mean * mean;
    let c_u = moments.interarrival - lambda.powi(-2);
    Ok(lambda * c_v + lambda.powi(3) * c_u * mean * mean)
}

fn bm_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

fn bm_grid(n_steps: usize, horizon: f64) -> Vec<f64> {
    (0..=n_steps).map(|i| horizon * i as f64 / n_steps as f64).collect()
}

/// Reflected zero-drift Brownian paths with variance rate `v` on
/// `n_steps + 1` grid points over `[0, T]`. Path `i` uses its own stream.
pub fn bm_workload_paths(
    variance_rate: f64,
    n_steps: usize,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<ReflectedPath>, HtError> {
    if n_steps < MIN_BM_STEPS {
        return Err(HtError::TooFewSteps(n_steps));
    }
    let times = bm_grid(n_steps, horizon);
    let sd = (variance_rate * horizon / n_steps as f64).sqrt();
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = bm_rng(seed, i);
            let mut x = 0.0;
            let mut raw = Vec::with_capacity(n_steps + 1);
            raw.push(0.0);
            for _ in 0..n_steps {
                let z: f64 = StandardNormal.sample(&mut rng);
                x += sd * z;
                raw.push(x);
            }
            reflect(&times, &raw)
        })
        .collect())
}

/// `∫ W²` of each path produced by [`bm_workload_paths`] with the same
/// arguments, computed without storing the paths.
pub fn bm_workload_sq_integrals(
    variance_rate: f64,
    n_steps: usize,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>, HtError> {
    if n_steps < MIN_BM_STEPS {
        return Err(HtError::TooFewSteps(n_steps));
    }
    let times = bm_grid(n_steps, horizon);
    let sd = (variance_rate * horizon / n_steps as f64).sqrt();
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = bm_rng(seed, i);
            let (mut x, mut running_min, mut acc) = (0.0f64, 0.0f64, 0.0);
            for step in 0..n_steps {
                let w = x - running_min;
                acc += (times[step + 1] - times[step]) * w * w;
                let z: f64 = StandardNormal.sample(&mut rng);
                x += sd * z;
                running_min = running_min.min(x);
            }
            acc
        })
        .collect())
}

/// Optimal split of workload `r` across predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub r: f64,
    pub x: Vec<f64>,
    /// `Σ_l λ̃_l C̃_l(x_l/ρ̃_l)`.
    pub objective: f64,
}

pub fn mixture_costs(params: &PredictedClassParams, config: &SystemConfig) -> Result<Vec<MixtureCost>, HtError> {
    (0..params.num_classes()).map(|l| mixture_cost(l, params, &config.costs).map_err(HtError::from)).collect()
}

pub fn allocation_objective(x: &[f64], params: &PredictedClassParams, costs: &[MixtureCost]) -> f64 {
    x.iter().enumerate().map(|(l, &xl)| params.lambda_tilde[l] * costs[l].value(xl / params.rho_tilde[l])).sum()
}

/// Minimizes `Σ_l λ̃_l C̃_l(x_l/ρ̃_l)` subject to `Σ x_l = r`, `x ≥ 0`.
pub fn kkt_solve(r: f64, params: &PredictedClassParams, costs: &[MixtureCost]) -> Result<Allocation, HtError> {
    let k = params.num_classes();
    if costs.len() != k {
        return Err(HtError::ClassCount { expected: k, got: costs.len() });
    }
    if !(r >= 0.0) {
        return Err(HtError::NegativeWorkload(r));
    }
    if r == 0.0 {
        return Ok(Allocation { r, x: vec![0.0; k], objective: 0.0 });
    }
    let rho = &params.rho_tilde;
    let mu = &params.mu_tilde;
    let others = |x1: f64| -> Vec<f64> {
        let marginal = costs[0].derivative(x1 / rho[0]);
        (1..k).map(|l| rho[l] * costs[l].inverse_derivative(mu[0] / mu[l] * marginal)).collect()
    };
    let g = |x1: f64| x1 + others(x1).iter().sum::<f64>();
    let tol = 1e-10 * r.max(1.0);
    let g_hi = g(r);
    if !(g_hi >= r - tol) {
        return Err(HtError::BracketFailure { r });
    }
    let (mut lo, mut hi) = (0.0, r);
    let mut x1 = r;
    if (g_hi - r).abs() > tol {
        for _ in 0..BISECTION_CAP {
            x1 = 0.5 * (lo + hi);
            let gx = g(x1);
            if (gx - r).abs() <= tol && hi - lo <= tol {
                break;
            }
            if gx < r {
                lo = x1;
            } else {
                hi = x1;
            }
        }
    }
    let rest = others(x1);
    let rest_sum: f64 = rest.iter().sum();
    let mut x = Vec::with_capacity(k);
    x.push((r - rest_sum).max(0.0));
    x.extend(rest);
    let objective = allocation_objective(&x, params, costs);
    Ok(Allocation { r, x, objective })
}

/// Closed-form two-class split under quadratic costs.
pub fn two_class_xstar(r: f64, config: &SystemConfig) -> Result<(f64, f64), HtError> {
    if config.num_classes() != 2 {
        return Err(HtError::ClassCount { expected: 2, got: config.num_classes() });
    }
    if !config.is_quadratic() {
        return Err(HtError::NonQuadratic);
    }
    let q = &config.confusion;
    let a = |l: usize| {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..2 {
            let mass = config.lambda * config.prevalences[k] * q.get(k, l);
            num += mass * config.costs[k].coeff;
            den += mass / config.service_rates[k];
        }
        num / (den * den)
    };
    let (a1, a2) = (a(0), a(1));
    Ok((r * a2 / (a1 + a2), r * a1 / (a1 + a2)))
}

/// Quadratic-cost coefficients of the limiting cumulative costs.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCostCoefficients {
    pub beta: Vec<f64>,
    pub beta_naive: Vec<f64>,
    pub jstar_coeff: f64,
    pub jnaive_coeff: f64,
}

impl QuadraticCostCoefficients {
    pub fn new(config: &SystemConfig) -> Result<Self, HtError> {
        if !config.is_quadratic() {
            return Err(HtError::NonQuadratic);
        }
        let params = derive_predicted_params(config)?;
        let costs = mixture_costs(&params, config)?;
        let k = params.num_classes();
        let beta: Vec<f64> =
            (0..k).map(|l| params.mu_tilde[l] * costs[l].quadratic_coeff().unwrap() / params.rho_tilde[l]).collect();
        let beta_naive: Vec<f64> =
            (0..k).map(|l| params.mu_tilde[l] * config.costs[l].coeff / params.rho_tilde[l]).collect();
        let jstar_coeff = 1.0 / beta.iter().map(|b| 1.0 / b).sum::<f64>();
        let jnaive_coeff = (0..k)
            .map(|l| {
                let s: f64 = beta_naive.iter().map(|bm| beta_naive[l] / bm).sum();
                beta[l] / (s * s)
            })
            .sum();
        Ok(Self { beta, beta_naive, jstar_coeff, jnaive_coeff })
    }
}

/// Per-path `J*` under quadratic costs: `jstar_coeff · ½ ∫ W²`.
pub fn jstar_quadratic(config: &SystemConfig, paths: &[ReflectedPath]) -> Result<Vec<f64>, HtError> {
    let coeffs = QuadraticCostCoefficients::new(config)?;
    Ok(paths.iter().map(|p| coeffs.jstar_coeff * 0.5 * p.integral_sq()).collect())
}

/// Per-path `J*` by solving the allocation at every grid point.
pub fn jstar_general(config: &SystemConfig, paths: &[ReflectedPath]) -> Result<Vec<f64>, HtError> {
    let params = derive_predicted_params(config)?;
    let costs = mixture_costs(&params, config)?;
    paths
        .par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for (t, &w) in p.times.windows(2).zip(&p.reflected) {
                acc += (t[1] - t[0]) * kkt_solve(w, &params, &costs)?.objective;
            }
            Ok(acc)
        })
        .collect()
}

/// Per-path `J*`; the quadratic closed form when available.
pub fn jstar(config: &SystemConfig, paths: &[ReflectedPath]) -> Result<Vec<f64>, HtError> {
    if config.is_quadratic() {
        jstar_quadratic(config, paths)
    } else {
        jstar_general(config, paths)
    }
}

/// Per-path limiting cost under Naive Gcμ: `jnaive_coeff · ½ ∫ W²`.
pub fn jnaive(config: &SystemConfig, paths: &[ReflectedPath]) -> Result<Vec<f64>, HtError> {
    let coeffs = QuadraticCostCoefficients::new(config)?;
    Ok(paths.iter().map(|p| coeffs.jnaive_coeff * 0.5 * p.integral_sq()).collect())
}

/// `J*(Q)/J*(I)`, which is path-independent.
pub fn relative_regret(config: &SystemConfig) -> Result<f64, HtError> {
    let ideal = config.with_confusion(ConfusionMatrix::identity(config.num_classes()));
    Ok(QuadraticCostCoefficients::new(config)?.jstar_coeff / QuadraticCostCoefficients::new(&ideal)?.jstar_coeff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCriteria {
    pub name: String,
    pub relative_regret: f64,
    pub jstar_coeff: f64,
    pub jnaive_coeff: f64,
}

/// Scores each candidate confusion matrix and sorts ascending by relative
/// regret. Ties keep input order.
pub fn rank_models(
    candidates: &[(String, ConfusionMatrix)],
    config: &SystemConfig,
) -> Result<Vec<ModelCriteria>, HtError> {
    let mut rows = candidates
        .iter()
        .map(|(name, q)| {
            let cfg = config.with_confusion(q.clone());
            let coeffs = QuadraticCostCoefficients::new(&cfg)?;
            Ok(ModelCriteria {
                name: name.clone(),
                relative_regret: relative_regret(&cfg)?,
                jstar_coeff: coeffs.jstar_coeff,
                jnaive_coeff: coeffs.jnaive_coeff,
            })
        })
        .collect::<Result<Vec<_>, HtError>>()?;
    rows.sort_by(|a, b| a.relative_regret.total_cmp(&b.relative_regret));
    Ok(rows)
}

pub fn write_criteria_csv<W: Write>(rows: &[ModelCriteria], out: W) -> Result<(), HtError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model_name", "relative_regret", "jstar_coeff", "jnaive_coeff"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.relative_regret.to_string(),
            r.jstar_coeff.to_string(),
            r.jnaive_coeff.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostFn, DistributionKind};
    use proptest::prelude::*;

    fn paper_two_class(q: Vec<Vec<f64>>) -> SystemConfig {
        SystemConfig {
            lambda: 1.0,
            prevalences: vec![0.3, 0.7],
            service_rates: vec![2.0, 1.0],
            costs: vec![CostFn::quadratic(1.0), CostFn::quadratic(10.0)],
            confusion: ConfusionMatrix::from_rows(q).unwrap(),
            horizon: 1.0,
            arrival_dist: DistributionKind::Exponential,
            service_dist: DistributionKind::Exponential,
        }
    }

    fn identity2() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![0.0, 1.0]]
    }

    fn solve(cfg: &SystemConfig, r: f64) -> Allocation {
        let params = derive_predicted_params(cfg).unwrap();
        let costs = mixture_costs(&params, cfg).unwrap();
        kkt_solve(r, &params, &costs).unwrap()
    }

    /// Coarse-to-fine grid search over the simplex `Σ x = r`.
    fn brute_force(r: f64, params: &PredictedClassParams, costs: &[MixtureCost]) -> (Vec<f64>, f64) {
        let k = params.num_classes();
        let eval = |x: &[f64]| allocation_objective(x, params, costs);
        if k == 1 {
            return (vec![r], eval(&[r]));
        }
        let free = k - 1;
        let steps = 40usize;
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut idx = vec![0usize; free];
        loop {
            let used: usize = idx.iter().sum();
            if used <= steps {
                let mut x: Vec<f64> = idx.iter().map(|&i| r * i as f64 / steps as f64).collect();
                x.push(r * (steps - used) as f64 / steps as f64);
                let v = eval(&x);
                if best.as_ref().is_none_or(|b| v < b.1) {
                    best = Some((x, v));
                }
            }
            let mut d = 0;
            while d < free {
                idx[d] += 1;
                if idx[d] <= steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == free {
                break;
            }
        }
        let (mut x, mut v) = best.unwrap();
        let mut h = r / steps as f64;
        while h > 1e-4 * r {
            let mut improved = true;
            while improved {
                improved = false;
                for i in 0..k {
                    for j in 0..k {
                        if i == j || x[j] < h {
                            continue;
                        }
                        let mut y = x.clone();
                        y[i] += h;
                        y[j] -= h;
                        let vy = eval(&y);
                        if vy < v {
                            x = y;
                            v = vy;
                            improved = true;
                        }
                    }
                }
            }
            h *= 0.5;
        }
        (x, v)
    }

    #[test]
    fn reflect_examples() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(reflect(&t, &[0.0, 1.0, 1.0, 4.0]).reflected, vec![0.0, 1.0, 1.0, 4.0]);
        assert_eq!(reflect(&t, &[0.0, -1.0, -2.0, -3.0]).reflected, vec![0.0; 4]);
        assert_eq!(reflect(&t, &[0.0, -1.0, -0.5, -2.5]).reflected, vec![0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn reflection_lipschitz_constant_is_two() {
        let t = [0.0, 1.0, 2.0];
        let fx = reflect(&t, &[0.0, 0.0, 0.0]);
        let fy = reflect(&t, &[0.0, -1.0, 1.0]);
        assert_eq!(fy.reflected, vec![0.0, 0.0, 2.0]);
        assert_eq!(fx.reflected, vec![0.0; 3]);
    }

    #[test]
    fn variance_rate_examples() {
        let mut cfg = paper_two_class(identity2());
        cfg.arrival_dist = DistributionKind::Deterministic;
        cfg.service_dist = DistributionKind::Deterministic;
        cfg.prevalences = vec![1.0, 0.0];
        let v = workload_variance_rate(&cfg, &WorkloadMoments::from_config(&cfg)).unwrap();
        assert!(v.abs() < 1e-15);

        let exp = paper_two_class(identity2());
        let m = WorkloadMoments::from_config(&exp);
        assert!((m.interarrival - exp.lambda.powi(-2) - 1.0 / exp.lambda.powi(2)).abs() < 1e-15);

        let lambda = 3.0;
        let single = SystemConfig {
            lambda,
            prevalences: vec![1.0],
            service_rates: vec![lambda],
            costs: vec![CostFn::quadratic(1.0)],
            confusion: ConfusionMatrix::identity(1),
            horizon: 1.0,
            arrival_dist: DistributionKind::Exponential,
            service_dist: DistributionKind::Exponential,
        };
        let v = workload_variance_rate(&single, &WorkloadMoments::from_config(&single)).unwrap();
        assert!((v - 2.0 / lambda).abs() < 1e-12);

        let bad = WorkloadMoments { interarrival: f64::INFINITY, service: vec![1.0] };
        assert!(matches!(workload_variance_rate(&single, &bad), Err(HtError::NonFiniteMoment(_))));
    }

    #[test]
    fn bm_paths_basic() {
        let zero = bm_workload_paths(0.0, 100, 1.0, 3, 1).unwrap();
        assert!(zero.iter().all(|p| p.reflected.iter().all(|&w| w == 0.0)));
        let a = bm_workload_paths(1.3, 200, 1.0, 5, 9).unwrap();
        let b = bm_workload_paths(1.3, 200, 1.0, 5, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.reflected.iter().all(|&w| w >= 0.0)));
        assert!(matches!(bm_workload_paths(1.0, 99, 1.0, 1, 0), Err(HtError::TooFewSteps(99))));
    }

    #[test]
    fn streamed_integrals_match_paths() {
        let paths = bm_workload_paths(2.0, 500, 1.5, 8, 4).unwrap();
        let ints = bm_workload_sq_integrals(2.0, 500, 1.5, 8, 4).unwrap();
        for (p, i) in paths.iter().zip(&ints) {
            assert!((p.integral_sq() - i).abs() <= 1e-12 * i.max(1e-12));
        }
    }

    #[test]
    fn bm_integral_matches_reflected_bm_mean() {
        // For reflected BM from 0, E[W(t)²] = v t, so E∫₀ᵀ W² = v T²/2.
        let v = 1.0;
        for n_steps in [1_000, 10_000] {
            let ints = bm_workload_sq_integrals(v, n_steps, 1.0, 4000, 17).unwrap();
            let n = ints.len() as f64;
            let mean = ints.iter().sum::<f64>() / n;
            let sd = (ints.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((mean - 0.5).abs() < 4.0 * sd / n.sqrt() + 0.5 / (n_steps as f64).sqrt(), "{n_steps}: {mean}");
        }
    }

    #[test]
    fn kkt_zero_and_single_class() {
        let cfg = paper_two_class(identity2());
        assert_eq!(solve(&cfg, 0.0).x, vec![0.0, 0.0]);
        let single = SystemConfig {
            prevalences: vec![1.0],
            service_rates: vec![2.0],
            costs: vec![CostFn::new(3.0, 3.0).unwrap()],
            confusion: ConfusionMatrix::identity(1),
            ..cfg
        };
        assert_eq!(solve(&single, 1.7).x, vec![1.7]);
    }

    #[test]
    fn kkt_symmetric_split() {
        let mut cfg = paper_two_class(identity2());
        cfg.prevalences = vec![0.5, 0.5];
        cfg.service_rates = vec![1.5, 1.5];
        cfg.costs = vec![CostFn::new(2.0, 3.0).unwrap(); 2];
        let a = solve(&cfg, 2.0);
        assert!((a.x[0] - 1.0).abs() < 1e-9 && (a.x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kkt_paper_instance() {
        let cfg = paper_two_class(identity2());
        let a = solve(&cfg, 1.0);
        // a_1 = c_1 μ_1²/p_1 = 40/3, a_2 = c_2 μ_2²/p_2 = 100/7.
        let (a1, a2) = (40.0 / 3.0, 100.0 / 7.0);
        let x1 = a2 / (a1 + a2);
        assert!((a.x[0] - x1).abs() < 1e-9);
        assert!((a.x[0] - 0.51724).abs() < 5e-6 && (a.x[1] - 0.48276).abs() < 5e-6);
        let (c1, c2) = two_class_xstar(1.0, &cfg).unwrap();
        assert!((c1 - a.x[0]).abs() < 1e-8 && (c2 - a.x[1]).abs() < 1e-8);

        let params = derive_predicted_params(&cfg).unwrap();
        let costs = mixture_costs(&params, &cfg).unwrap();
        let mut best = (0.0, f64::INFINITY);
        for i in 0..=1_000_000 {
            let x = i as f64 * 1e-6;
            let v = allocation_objective(&[x, 1.0 - x], &params, &costs);
            if v < best.1 {
                best = (x, v);
            }
        }
        assert!((best.0 - a.x[0]).abs() <= 1e-6);
    }

    #[test]
    fn two_class_matches_kkt_under_noise() {
        let cfg = paper_two_class(vec![vec![0.8, 0.2], vec![0.35, 0.65]]);
        let a = solve(&cfg, 2.5);
        let (x1, x2) = two_class_xstar(2.5, &cfg).unwrap();
        assert!((x1 - a.x[0]).abs() < 1e-8 && (x2 - a.x[1]).abs() < 1e-8);
    }

    #[test]
    fn two_class_dip() {
        let ideal = two_class_xstar(1.0, &paper_two_class(identity2())).unwrap().0;
        let noisy = two_class_xstar(1.0, &paper_two_class(vec![vec![1.0, 0.0], vec![0.1, 0.9]])).unwrap().0;
        assert!(noisy < ideal, "{noisy} vs {ideal}");
    }

    #[test]
    fn two_class_requires_quadratic() {
        let mut cfg = paper_two_class(identity2());
        cfg.costs[0] = CostFn::new(1.0, 3.0).unwrap();
        assert!(matches!(two_class_xstar(1.0, &cfg), Err(HtError::NonQuadratic)));
        assert!(matches!(QuadraticCostCoefficients::new(&cfg), Err(HtError::NonQuadratic)));
    }

    #[test]
    fn jstar_special_cases() {
        let cfg = paper_two_class(vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        let zero = bm_workload_paths(0.0, 100, 1.0, 2, 0).unwrap();
        assert!(jstar(&cfg, &zero).unwrap().iter().all(|&j| j == 0.0));

        let single = SystemConfig {
            lambda: 2.0,
            prevalences: vec![1.0],
            service_rates: vec![2.0],
            costs: vec![CostFn::quadratic(3.0)],
            confusion: ConfusionMatrix::identity(1),
            ..cfg.clone()
        };
        let paths = bm_workload_paths(1.0, 200, 1.0, 4, 3).unwrap();
        let j = jstar(&single, &paths).unwrap();
        let n = jnaive(&single, &paths).unwrap();
        for (p, (a, b)) in paths.iter().zip(j.iter().zip(&n)) {
            let expected = 2.0 * 3.0 * 0.5 * p.integral_sq();
            assert!((a - expected).abs() < 1e-12 * expected.max(1.0));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn jstar_general_agrees_with_fast_path() {
        let cfg = paper_two_class(vec![vec![0.7, 0.3], vec![0.25, 0.75]]);
        let paths = bm_workload_paths(1.7, 300, 1.0, 6, 8).unwrap();
        let fast = jstar_quadratic(&cfg, &paths).unwrap();
        let general = jstar_general(&cfg, &paths).unwrap();
        for (a, b) in fast.iter().zip(&general) {
            assert!((a - b).abs() <= 1e-8 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn jnaive_equals_jstar_without_noise() {
        let cfg = paper_two_class(identity2());
        let c = QuadraticCostCoefficients::new(&cfg).unwrap();
        assert!((c.jstar_coeff - c.jnaive_coeff).abs() < 1e-12 * c.jstar_coeff);
        assert_eq!(relative_regret(&cfg).unwrap(), 1.0);
    }

    #[test]
    fn rank_models_orders_and_keeps_ties() {
        let cfg = paper_two_class(identity2());
        let mild = ConfusionMatrix::from_rows(vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let harsh = ConfusionMatrix::from_rows(vec![vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let single = rank_models(&[("a".into(), mild.clone())], &cfg).unwrap();
        assert_eq!(single.len(), 1);
        let ranked = rank_models(
            &[
                ("harsh".into(), harsh),
                ("mild".into(), mild.clone()),
                ("mild2".into(), mild),
                ("ideal".into(), ConfusionMatrix::identity(2)),
            ],
            &cfg,
        )
        .unwrap();
        let names: Vec<_> = ranked.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["ideal", "mild", "mild2", "harsh"]);
        assert_eq!(ranked[1].relative_regret, ranked[2].relative_regret);
        let mut buf = Vec::new();
        write_criteria_csv(&ranked, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("model_name,relative_regret,jstar_coeff,jnaive_coeff\n"));
    }

    fn instance(k: usize) -> impl Strategy<Value = SystemConfig> {
        (
            prop::collection::vec(0.05f64..1.0, k),
            prop::collection::vec(0.5f64..5.0, k),
            prop::collection::vec(0.5f64..20.0, k),
            prop::collection::vec(prop::collection::vec(0.02f64..1.0, k), k),
            prop::collection::vec(prop::sample::select(vec![2.0, 2.5, 3.0]), k),
        )
            .prop_map(move |(p, mu, c, q, pw)| {
                let ps: f64 = p.iter().sum();
                SystemConfig {
                    lambda: 1.0,
                    prevalences: p.iter().map(|x| x / ps).collect(),
                    service_rates: mu,
                    costs: c.iter().zip(&pw).map(|(&c, &w)| CostFn::new(c, w).unwrap()).collect(),
                    confusion: ConfusionMatrix::from_rows(
                        q.iter()
                            .map(|row| {
                                let s: f64 = row.iter().sum();
                                row.iter().map(|x| x / s).collect()
                            })
                            .collect(),
                    )
                    .unwrap(),
                    horizon: 1.0,
                    arrival_dist: DistributionKind::Exponential,
                    service_dist: DistributionKind::Exponential,
                }
            })
    }

    fn any_instance() -> impl Strategy<Value = SystemConfig> {
        (1usize..=4).prop_flat_map(instance)
    }

    fn quadratic_instance() -> impl Strategy<Value = SystemConfig> {
        any_instance().prop_map(|mut c| {
            for cost in c.costs.iter_mut() {
                *cost = CostFn::quadratic(cost.coeff);
            }
            c
        })
    }

    proptest! {
        #[test]
        fn reflection_is_lipschitz(
            xs in prop::collection::vec(-5.0f64..5.0, 1..60),
            noise in prop::collection::vec(-1.0f64..1.0, 60),
        ) {
            let mut x = xs.clone();
            x[0] = x[0].abs();
            let mut y: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
            y[0] = y[0].abs();
            let t: Vec<f64> = (0..x.len()).map(|i| i as f64).collect();
            let (fx, fy) = (reflect(&t, &x), reflect(&t, &y));
            let sup_in = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let sup_out = fx.reflected.iter().zip(&fy.reflected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(sup_out <= 2.0 * sup_in + 1e-12);
            let reg = |p: &ReflectedPath| -> Vec<f64> { p.reflected.iter().zip(&p.raw).map(|(w, x)| w - x).collect() };
            let sup_reg = reg(&fx).iter().zip(&reg(&fy)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(sup_reg <= sup_in + 1e-12);
            prop_assert!(fx.reflected.iter().all(|&w| w >= 0.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn kkt_balance_and_brute_force(cfg in any_instance(), r in 0.1f64..5.0) {
            let params = derive_predicted_params(&cfg).unwrap();
            let costs = mixture_costs(&params, &cfg).unwrap();
            let a = kkt_solve(r, &params, &costs).unwrap();
            let sum: f64 = a.x.iter().sum();
            prop_assert!((sum - r).abs() <= 1e-9);
            prop_assert!(a.x.iter().all(|&x| x >= 0.0));
            let marg: Vec<f64> = (0..a.x.len())
                .map(|l| params.mu_tilde[l] * costs[l].derivative(a.x[l] / params.rho_tilde[l]))
                .collect();
            for m in &marg {
                prop_assert!((m - marg[0]).abs() <= 1e-6 * marg[0].abs().max(1e-300), "{:?}", marg);
            }
            let (bx, bv) = brute_force(r, &params, &costs);
            prop_assert!(a.objective <= bv * (1.0 + 1e-12));
            let gap = a.x.iter().zip(&bx).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(gap <= 2e-3 * r, "gap {} kkt {:?} brute {:?}", gap, a.x, bx);
        }

        #[test]
        fn allocation_is_continuous_in_r(cfg in any_instance(), r in 0.0f64..3.0) {
            let params = derive_predicted_params(&cfg).unwrap();
            let costs = mixture_costs(&params, &cfg).unwrap();
            let a = kkt_solve(r, &params, &costs).unwrap();
            let b = kkt_solve(r + 1e-6, &params, &costs).unwrap();
            let gap = a.x.iter().zip(&b.x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(gap <= 1.1e-6);
        }

        #[test]
        fn jstar_coefficient_identity(cfg in quadratic_instance()) {
            let c = QuadraticCostCoefficients::new(&cfg).unwrap();
            let lhs: f64 = c.beta.iter().map(|bl| {
                let s: f64 = c.beta.iter().map(|bm| bl / bm).sum();
                bl / (s * s)
            }).sum();
            prop_assert!((lhs - c.jstar_coeff).abs() <= 1e-10 * c.jstar_coeff);
            prop_assert!(c.beta.iter().all(|&b| b > 0.0));
        }

        #[test]
        fn naive_never_beats_optimal(cfg in quadratic_instance()) {
            let c = QuadraticCostCoefficients::new(&cfg).unwrap();
            prop_assert!(c.jstar_coeff <= c.jnaive_coeff * (1.0 + 1e-12));
            prop_assert!(relative_regret(&cfg).unwrap() >= 1.0 - 1e-12);
        }

        #[test]
        fn quadratic_allocation_matches_beta_split(cfg in quadratic_instance(), r in 0.1f64..4.0) {
            let c = QuadraticCostCoefficients::new(&cfg).unwrap();
            let a = solve(&cfg, r);
            let inv: f64 = c.beta.iter().map(|b| 1.0 / b).sum();
            for (x, b) in a.x.iter().zip(&c.beta) {
                prop_assert!((x - r / b / inv).abs() <= 1e-9 * r.max(1.0));
            }
            prop_assert!((a.objective - 0.5 * c.jstar_coeff * r * r).abs() <= 1e-9 * a.objective.max(1.0));
        }
    }
}
