//! Index policies mapping the observable queue state to the class to serve.
//!
//! Every index has the Gcμ shape `rate · C'(queue_length / arrival_rate)`;
//! the policies differ only in which classes they see and which rate, arrival
//! rate and cost they plug in.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    derive_predicted_params, mixture_cost, CostFn, MixtureCost, ModelError, PredictedClassParams, SystemConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("oracle index requires true-class visibility")]
    OracleUnavailable,
    #[error("unknown policy '{0}' (expected oracle, naive, pcmu or fcfs)")]
    UnknownPolicy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    OracleGcmu,
    NaiveGcmu,
    Pcmu,
    GlobalFcfs,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] =
        [PolicyKind::OracleGcmu, PolicyKind::NaiveGcmu, PolicyKind::Pcmu, PolicyKind::GlobalFcfs];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::OracleGcmu => "oracle",
            PolicyKind::NaiveGcmu => "naive",
            PolicyKind::Pcmu => "pcmu",
            PolicyKind::GlobalFcfs => "fcfs",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(PolicyKind::OracleGcmu),
            "naive" => Ok(PolicyKind::NaiveGcmu),
            "pcmu" => Ok(PolicyKind::Pcmu),
            "fcfs" => Ok(PolicyKind::GlobalFcfs),
            other => Err(PolicyError::UnknownPolicy(other.to_string())),
        }
    }
}

/// Which class label the engine exposes to the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    TrueClass,
    PredictedClass,
}

/// What a policy observes at a decision epoch.
#[derive(Debug, Clone, Copy)]
pub struct QueueSnapshot<'a> {
    pub visibility: Visibility,
    /// Number of present jobs per visible class.
    pub counts: &'a [usize],
    /// Arrival time of the oldest present job per visible class
    /// (`f64::INFINITY` when empty).
    pub head_arrival: &'a [f64],
    /// Visible class of the job currently in service.
    pub in_service: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Idle,
    Serve(usize),
}

/// `μ̃_l C̃_l'(Ñ_l / λ̃_l)`.
pub fn pcmu_index(l: usize, queue_len: usize, params: &PredictedClassParams, cost: &MixtureCost) -> f64 {
    params.mu_tilde[l] * cost.derivative(queue_len as f64 / params.lambda_tilde[l])
}

/// `μ̃_l C_l'(Ñ_l / λ̃_l)`: predicted classes treated as if they were true.
pub fn naive_gcmu_index(l: usize, queue_len: usize, params: &PredictedClassParams, costs: &[CostFn]) -> f64 {
    params.mu_tilde[l] * costs[l].derivative(queue_len as f64 / params.lambda_tilde[l])
}

/// `μ_k C_k'(N_k / (λ p_k))`, only available when true classes are visible.
pub fn oracle_gcmu_index(k: usize, state: &QueueSnapshot<'_>, config: &SystemConfig) -> Result<f64, PolicyError> {
    if state.visibility != Visibility::TrueClass {
        return Err(PolicyError::OracleUnavailable);
    }
    let lambda_k = config.lambda * config.prevalences[k];
    if lambda_k <= 0.0 {
        return Ok(0.0);
    }
    Ok(config.service_rates[k] * config.costs[k].derivative(state.counts[k] as f64 / lambda_k))
}

/// A policy with its index parameters resolved against one configuration.
#[derive(Debug, Clone)]
pub struct PolicyRef {
    kind: PolicyKind,
    rates: Vec<f64>,
    arrival_rates: Vec<f64>,
    costs: Vec<MixtureCost>,
}

impl PolicyRef {
    /// Resolves `kind` against `config`; predicted-class policies use the
    /// confusion matrix stored in `config`.
    pub fn new(kind: PolicyKind, config: &SystemConfig) -> Result<Self, PolicyError> {
        let k = config.num_classes();
        match kind {
            PolicyKind::OracleGcmu => Ok(PolicyRef {
                kind,
                rates: config.service_rates.clone(),
                arrival_rates: config.class_rates(),
                costs: config.costs.iter().map(|c| MixtureCost::single(*c)).collect(),
            }),
            PolicyKind::GlobalFcfs => {
                Ok(PolicyRef { kind, rates: vec![1.0; k], arrival_rates: vec![1.0; k], costs: Vec::new() })
            }
            PolicyKind::Pcmu => {
                let params = derive_predicted_params(config)?;
                let costs = (0..k).map(|l| mixture_cost(l, &params, &config.costs)).collect::<Result<Vec<_>, _>>()?;
                Ok(PolicyRef { kind, rates: params.mu_tilde, arrival_rates: params.lambda_tilde, costs })
            }
            PolicyKind::NaiveGcmu => {
                let params = derive_predicted_params(config)?;
                Ok(PolicyRef {
                    kind,
                    rates: params.mu_tilde,
                    arrival_rates: params.lambda_tilde,
                    costs: config.costs.iter().map(|c| MixtureCost::single(*c)).collect(),
                })
            }
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.rates.len()
    }

    pub fn visibility(&self) -> Visibility {
        match self.kind {
            PolicyKind::OracleGcmu => Visibility::TrueClass,
            _ => Visibility::PredictedClass,
        }
    }

    pub fn is_preemptive(&self) -> bool {
        self.kind != PolicyKind::GlobalFcfs
    }

    /// Index of `class` holding `queue_len` jobs. FCFS has no index and
    /// returns 0.
    pub fn index(&self, class: usize, queue_len: usize) -> f64 {
        if self.costs.is_empty() || queue_len == 0 {
            return 0.0;
        }
        let norm = self.arrival_rates[class];
        if norm <= 0.0 {
            return 0.0;
        }
        self.rates[class] * self.costs[class].derivative(queue_len as f64 / norm)
    }

    pub fn decide(&self, state: &QueueSnapshot<'_>) -> Decision {
        if self.kind == PolicyKind::GlobalFcfs {
            if let Some(c) = state.in_service {
                if state.counts[c] > 0 {
                    return Decision::Serve(c);
                }
            }
            let mut best: Option<usize> = None;
            for (c, &n) in state.counts.iter().enumerate() {
                if n > 0 && best.is_none_or(|b| state.head_arrival[c] < state.head_arrival[b]) {
                    best = Some(c);
                }
            }
            return best.map_or(Decision::Idle, Decision::Serve);
        }
        let mut best: Option<(usize, f64)> = None;
        for (c, &n) in state.counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let idx = self.index(c, n);
            if best.is_none_or(|(_, b)| idx > b) {
                best = Some((c, idx));
            }
        }
        best.map_or(Decision::Idle, |(c, _)| Decision::Serve(c))
    }
}
