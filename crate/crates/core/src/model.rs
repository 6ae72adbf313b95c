//! Core domain types: cost functions, confusion matrices, system
//! configurations, and the predicted-class primitives derived from them.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for row sums of a confusion matrix and for the prevalence sum.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Half-width of the band around ρ = 1 inside which a configuration counts
/// as heavy traffic.
pub const HEAVY_TRAFFIC_BAND: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("predicted class {column} receives no arrivals (sum_k p_k q_kl = 0)")]
    ZeroColumn { column: usize },
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("confusion matrix must be square and non-empty, got {rows} rows with a row of length {cols}")]
    BadShape { rows: usize, cols: usize },
    #[error("invalid configuration: {0}")]
    Invalid(ValidationErrors),
    #[error("config json: {0}")]
    Json(String),
}

/// One violated invariant of a [`SystemConfig`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RowNotStochastic { row: usize, sum: f64 },
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    NonPositiveRate { what: &'static str, index: usize, value: f64 },
    PrevalenceSum { sum: f64 },
    NegativePrevalence { index: usize, value: f64 },
    NonPositiveCoeff { index: usize, value: f64 },
    PowerBelowTwo { index: usize, value: f64 },
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    NonPositiveHorizon { value: f64 },
    ZeroColumn { column: usize },
    BadDistribution { what: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowNotStochastic { row, sum } => {
                write!(f, "RowNotStochastic: confusion row {row} sums to {sum}")
            }
            Violation::EntryOutOfRange { row, col, value } => {
                write!(f, "EntryOutOfRange: q[{row}][{col}] = {value}")
            }
            Violation::NonPositiveRate { what, index, value } => {
                write!(f, "NonPositiveRate: {what}[{index}] = {value}")
            }
            Violation::PrevalenceSum { sum } => write!(f, "PrevalenceSum: prevalences sum to {sum}"),
            Violation::NegativePrevalence { index, value } => {
                write!(f, "NegativePrevalence: p[{index}] = {value}")
            }
            Violation::NonPositiveCoeff { index, value } => {
                write!(f, "NonPositiveCoeff: costs[{index}].coeff = {value}")
            }
            Violation::PowerBelowTwo { index, value } => {
                write!(f, "PowerBelowTwo: costs[{index}].power = {value}")
            }
            Violation::DimensionMismatch { what, expected, found } => {
                write!(f, "DimensionMismatch: {what} has {found} entries, expected {expected}")
            }
            Violation::NonPositiveHorizon { value } => write!(f, "NonPositiveHorizon: {value}"),
            Violation::ZeroColumn { column } => {
                write!(f, "ZeroColumn: predicted class {column} has zero arrival probability")
            }
            Violation::BadDistribution { what } => write!(f, "BadDistribution: {what}"),
        }
    }
}

/// Aggregated validation failures.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationErrors(pub Vec<Violation>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Monomial delay cost `C(t) = (coeff / power) * t^power`.
///
/// With `power = 2` this is `c t^2 / 2`, so `C'(t) = c t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostFn {
    pub coeff: f64,
    pub power: f64,
}

impl CostFn {
    pub fn new(coeff: f64, power: f64) -> Result<Self, ModelError> {
        let c = CostFn { coeff, power };
        let mut v = Vec::new();
        c.check(0, &mut v);
        if v.is_empty() {
            Ok(c)
        } else {
            Err(ModelError::Invalid(ValidationErrors(v)))
        }
    }

    pub fn quadratic(coeff: f64) -> Self {
        CostFn { coeff, power: 2.0 }
    }

    fn check(&self, index: usize, out: &mut Vec<Violation>) {
        if !(self.coeff > 0.0 && self.coeff.is_finite()) {
            out.push(Violation::NonPositiveCoeff { index, value: self.coeff });
        }
        if !(self.power >= 2.0 && self.power.is_finite()) {
            out.push(Violation::PowerBelowTwo { index, value: self.power });
        }
    }

    pub fn is_quadratic(&self) -> bool {
        self.power == 2.0
    }

    pub fn value(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.coeff / self.power * t.powf(self.power)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if self.is_quadratic() {
            self.coeff * t
        } else {
            self.coeff * t.powf(self.power - 1.0)
        }
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        if self.is_quadratic() {
            return self.coeff;
        }
        if t <= 0.0 {
            return 0.0;
        }
        self.coeff * (self.power - 1.0) * t.powf(self.power - 2.0)
    }
}

/// Row-stochastic matrix `q[k][l] = P(predicted l | true k)`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ConfusionMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for ConfusionMatrix {
    type Error = ModelError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        let dim = rows.len();
        if dim == 0 {
            return Err(ModelError::BadShape { rows: 0, cols: 0 });
        }
        let mut entries = Vec::with_capacity(dim * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(ModelError::BadShape { rows: dim, cols: row.len() });
            }
            entries.extend_from_slice(row);
        }
        Ok(ConfusionMatrix { dim, entries })
    }
}

impl From<ConfusionMatrix> for Vec<Vec<f64>> {
    fn from(m: ConfusionMatrix) -> Self {
        m.to_rows()
    }
}

impl ConfusionMatrix {
    /// Builds a matrix and checks entries and row sums.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let m = ConfusionMatrix::try_from(rows)?;
        let v = m.violations();
        if v.is_empty() {
            Ok(m)
        } else {
            Err(ModelError::Invalid(ValidationErrors(v)))
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for k in 0..dim {
            entries[k * dim + k] = 1.0;
        }
        ConfusionMatrix { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.entries[k * self.dim + l]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|k| self.row(k).to_vec()).collect()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.dim).all(|k| (0..self.dim).all(|l| self.get(k, l) == if k == l { 1.0 } else { 0.0 }))
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for k in 0..self.dim {
            let mut sum = 0.0;
            for l in 0..self.dim {
                let q = self.get(k, l);
                if !(0.0..=1.0).contains(&q) {
                    out.push(Violation::EntryOutOfRange { row: k, col: l, value: q });
                }
                sum += q;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                out.push(Violation::RowNotStochastic { row: k, sum });
            }
        }
        out
    }
}

/// Distribution family for interarrival or service times. The mean is set by
/// the corresponding rate; only the shape is configured here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DistributionKind {
    #[default]
    Exponential,
    Deterministic,
    /// Lognormal with the given squared coefficient of variation.
    Lognormal {
        scv: f64,
    },
}

impl DistributionKind {
    pub fn scv(&self) -> f64 {
        match *self {
            DistributionKind::Exponential => 1.0,
            DistributionKind::Deterministic => 0.0,
            DistributionKind::Lognormal { scv } => scv,
        }
    }

    /// `E[X^2]` for a draw with mean `1 / rate`.
    pub fn second_moment(&self, rate: f64) -> f64 {
        (1.0 + self.scv()) / (rate * rate)
    }

    fn is_valid(&self) -> bool {
        match *self {
            DistributionKind::Lognormal { scv } => scv > 0.0 && scv.is_finite(),
            _ => true,
        }
    }
}

/// Prelimit description of a single-server multiclass queue with a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub lambda: f64,
    pub prevalences: Vec<f64>,
    pub service_rates: Vec<f64>,
    pub costs: Vec<CostFn>,
    pub confusion: ConfusionMatrix,
    pub horizon: f64,
    #[serde(default)]
    pub arrival_dist: DistributionKind,
    #[serde(default)]
    pub service_dist: DistributionKind,
}

/// Outcome of a successful validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub traffic_intensity: f64,
    pub warnings: Vec<String>,
}

impl SystemConfig {
    pub fn num_classes(&self) -> usize {
        self.prevalences.len()
    }

    /// `ρ = λ Σ_k p_k / μ_k`.
    pub fn traffic_intensity(&self) -> f64 {
        self.lambda * self.mean_service_time()
    }

    /// `Σ_k p_k / μ_k`, the mean service requirement of an arbitrary job.
    pub fn mean_service_time(&self) -> f64 {
        self.prevalences.iter().zip(&self.service_rates).map(|(p, mu)| p / mu).sum()
    }

    /// True-class arrival rates `λ p_k`.
    pub fn class_rates(&self) -> Vec<f64> {
        self.prevalences.iter().map(|p| self.lambda * p).collect()
    }

    pub fn is_quadratic(&self) -> bool {
        self.costs.iter().all(CostFn::is_quadratic)
    }

    /// Same system seen through a different classifier.
    pub fn with_confusion(&self, confusion: ConfusionMatrix) -> Self {
        SystemConfig { confusion, ..self.clone() }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let config: SystemConfig = serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        validate_config(&config)?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Checks every invariant of `config`, collecting all violations.
pub fn validate_config(config: &SystemConfig) -> Result<ValidationReport, ModelError> {
    let mut v = Vec::new();
    let k = config.num_classes();
    if k == 0 {
        v.push(Violation::DimensionMismatch { what: "prevalences", expected: 1, found: 0 });
    }
    if !(config.lambda > 0.0 && config.lambda.is_finite()) {
        v.push(Violation::NonPositiveRate { what: "lambda", index: 0, value: config.lambda });
    }
    if config.service_rates.len() != k {
        v.push(Violation::DimensionMismatch { what: "service_rates", expected: k, found: config.service_rates.len() });
    }
    if config.costs.len() != k {
        v.push(Violation::DimensionMismatch { what: "costs", expected: k, found: config.costs.len() });
    }
    if config.confusion.dim() != k {
        v.push(Violation::DimensionMismatch { what: "confusion", expected: k, found: config.confusion.dim() });
    }
    for (i, &p) in config.prevalences.iter().enumerate() {
        if !(p >= 0.0) {
            v.push(Violation::NegativePrevalence { index: i, value: p });
        }
    }
    let psum: f64 = config.prevalences.iter().sum();
    if (psum - 1.0).abs() > STOCHASTIC_TOL {
        v.push(Violation::PrevalenceSum { sum: psum });
    }
    for (i, &mu) in config.service_rates.iter().enumerate() {
        if !(mu > 0.0 && mu.is_finite()) {
            v.push(Violation::NonPositiveRate { what: "service_rates", index: i, value: mu });
        }
    }
    for (i, c) in config.costs.iter().enumerate() {
        c.check(i, &mut v);
    }
    if !(config.horizon > 0.0 && config.horizon.is_finite()) {
        v.push(Violation::NonPositiveHorizon { value: config.horizon });
    }
    if !config.arrival_dist.is_valid() {
        v.push(Violation::BadDistribution { what: "arrival_dist" });
    }
    if !config.service_dist.is_valid() {
        v.push(Violation::BadDistribution { what: "service_dist" });
    }
    v.extend(config.confusion.violations());
    if config.confusion.dim() == k {
        for l in 0..k {
            let col: f64 = (0..k).map(|j| config.prevalences[j] * config.confusion.get(j, l)).sum();
            if !(col > 0.0) {
                v.push(Violation::ZeroColumn { column: l });
            }
        }
    }
    if !v.is_empty() {
        return Err(ModelError::Invalid(ValidationErrors(v)));
    }
    let rho = config.traffic_intensity();
    let mut warnings = Vec::new();
    if (rho - 1.0).abs() > HEAVY_TRAFFIC_BAND {
        warnings.push(format!("traffic intensity {rho:.4} is outside the heavy-traffic band 1 ± {HEAVY_TRAFFIC_BAND}"));
    }
    Ok(ValidationReport { traffic_intensity: rho, warnings })
}

/// Per-predicted-class primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedClassParams {
    pub p_tilde: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    pub mu_tilde: Vec<f64>,
    pub rho_tilde: Vec<f64>,
    /// `mix_weights[k][l] = p_k q_kl / p̃_l`, the posterior of true class `k`
    /// given prediction `l`.
    pub mix_weights: Vec<Vec<f64>>,
}

impl PredictedClassParams {
    pub fn num_classes(&self) -> usize {
        self.p_tilde.len()
    }
}

pub fn derive_predicted_params(config: &SystemConfig) -> Result<PredictedClassParams, ModelError> {
    let k = config.num_classes();
    let q = &config.confusion;
    let mut p_tilde = vec![0.0; k];
    let mut rho_tilde = vec![0.0; k];
    let mut mean_service = vec![0.0; k];
    for l in 0..k {
        for j in 0..k {
            let mass = config.prevalences[j] * q.get(j, l);
            p_tilde[l] += mass;
            rho_tilde[l] += config.lambda * mass / config.service_rates[j];
        }
        if !(p_tilde[l] > 0.0) {
            return Err(ModelError::ZeroColumn { column: l });
        }
    }
    let mut mix_weights = vec![vec![0.0; k]; k];
    for l in 0..k {
        for j in 0..k {
            let w = config.prevalences[j] * q.get(j, l) / p_tilde[l];
            mix_weights[j][l] = w;
            mean_service[l] += w / config.service_rates[j];
        }
    }
    let lambda_tilde: Vec<f64> = p_tilde.iter().map(|p| config.lambda * p).collect();
    let mu_tilde: Vec<f64> = mean_service.iter().map(|m| 1.0 / m).collect();
    Ok(PredictedClassParams { p_tilde, lambda_tilde, mu_tilde, rho_tilde, mix_weights })
}

/// Posterior-weighted cost `C̃_l(t) = Σ_k w_kl C_k(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureCost {
    terms: Vec<(f64, CostFn)>,
}

impl MixtureCost {
    pub fn new(terms: Vec<(f64, CostFn)>) -> Self {
        let terms = terms.into_iter().filter(|(w, _)| *w > 0.0).collect();
        MixtureCost { terms }
    }

    pub fn single(cost: CostFn) -> Self {
        MixtureCost { terms: vec![(1.0, cost)] }
    }

    pub fn terms(&self) -> &[(f64, CostFn)] {
        &self.terms
    }

    pub fn value(&self, t: f64) -> f64 {
        self.terms.iter().map(|(w, c)| w * c.value(t)).sum()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.terms.iter().map(|(w, c)| w * c.derivative(t)).sum()
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        self.terms.iter().map(|(w, c)| w * c.second_derivative(t)).sum()
    }

    /// `c̃ = Σ_k w_kl c_k` when every component is quadratic.
    pub fn quadratic_coeff(&self) -> Option<f64> {
        if self.terms.iter().all(|(_, c)| c.is_quadratic()) {
            Some(self.terms.iter().map(|(w, c)| w * c.coeff).sum())
        } else {
            None
        }
    }

    /// Solves `C̃'(t) = y` for `t ≥ 0`.
    ///
    /// Closed form when all components share one power, otherwise bisection
    /// on the strictly increasing derivative.
    pub fn inverse_derivative(&self, y: f64) -> f64 {
        if y <= 0.0 || self.terms.is_empty() {
            return 0.0;
        }
        let power = self.terms[0].1.power;
        if self.terms.iter().all(|(_, c)| c.power == power) {
            let a: f64 = self.terms.iter().map(|(w, c)| w * c.coeff).sum();
            return if power == 2.0 { y / a } else { (y / a).powf(1.0 / (power - 1.0)) };
        }
        let mut hi = 1.0;
        while self.derivative(hi) < y {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.derivative(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

pub fn mixture_cost(l: usize, params: &PredictedClassParams, costs: &[CostFn]) -> Result<MixtureCost, ModelError> {
    let k = params.num_classes();
    if l >= k {
        return Err(ModelError::IndexOutOfRange { index: l, classes: k });
    }
    Ok(MixtureCost::new(costs.iter().enumerate().map(|(j, c)| (params.mix_weights[j][l], *c)).collect()))
}
