//! Discrete-event simulator of a single-server preemptive-resume queue.
//!
//! The scheduler sees only the labels exposed by its [`Visibility`]; service
//! requirements and costs follow true classes. Within a visible class jobs are
//! served first-come-first-served and never preempt each other. Across classes
//! the policy is re-evaluated at every arrival and every completion.
//!
//! Randomness comes from one ChaCha stream family per path. Interarrival
//! times, true classes, service requirements, classifications and thinning
//! decisions each draw from their own substream, so swapping the confusion
//! matrix or the policy leaves every other draw untouched.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfusionMatrix, DistributionKind, SystemConfig};
use crate::policies::{Decision, PolicyRef, QueueSnapshot, Visibility};

/// Default cap on processed events per path.
pub const DEFAULT_MAX_EVENTS: u64 = 200_000_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("event count exceeded the cap of {cap}")]
    EventOverflow { cap: u64 },
    #[error("rate schedule must stay positive: {0}")]
    ScheduleNonPositive(String),
    #[error("sampling grid needs at least 2 points, got {0}")]
    BadGrid(usize),
    #[error("arrival schedules require exponential interarrival times")]
    NonPoissonSchedule,
    #[error("policy is resolved for {policy} classes, config has {config}")]
    ClassMismatch { policy: usize, config: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Substream identifiers.
mod stream {
    pub const INTERARRIVAL: u64 = 0;
    pub const TRUE_CLASS: u64 = 1;
    pub const SERVICE: u64 = 2;
    pub const CLASSIFICATION: u64 = 3;
    pub const THINNING: u64 = 4;
}

pub fn substream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uniform draw on (0, 1].
fn open_uniform<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Unit-mean draw from `kind`.
fn unit_draw<R: Rng>(kind: DistributionKind, rng: &mut R) -> f64 {
    match kind {
        DistributionKind::Exponential => -open_uniform(rng).ln(),
        DistributionKind::Deterministic => 1.0,
        DistributionKind::Lognormal { scv } => {
            let s2 = (1.0 + scv).ln();
            let z: f64 = StandardNormal.sample(rng);
            (-0.5 * s2 + s2.sqrt() * z).exp()
        }
    }
}

/// Inverse-CDF draw of an index from a probability vector.
fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws the predicted class of a true-class-`true_class` job.
pub fn sample_classification<R: Rng>(true_class: usize, confusion: &ConfusionMatrix, rng: &mut R) -> usize {
    inverse_cdf(confusion.row(true_class), rng.random::<f64>())
}

/// Time-varying rate `r(t)` derived from a base rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateProfile {
    Constant {
        multiplier: f64,
    },
    /// `max(floor_fraction * base, base + amplitude * sin(omega * t))`.
    Sinusoid {
        amplitude: f64,
        omega: f64,
        floor_fraction: f64,
    },
    /// `max(floor_fraction * base, base - slope * t)`.
    LinearDecay {
        slope: f64,
        floor_fraction: f64,
    },
}

impl RateProfile {
    pub fn rate(&self, base: f64, t: f64) -> f64 {
        match *self {
            RateProfile::Constant { multiplier } => base * multiplier,
            RateProfile::Sinusoid { amplitude, omega, floor_fraction } => {
                (floor_fraction * base).max(base + amplitude * (omega * t).sin())
            }
            RateProfile::LinearDecay { slope, floor_fraction } => (floor_fraction * base).max(base - slope * t),
        }
    }

    /// Upper bound of `rate(base, t)` over all `t ≥ 0`.
    pub fn max_rate(&self, base: f64) -> f64 {
        match *self {
            RateProfile::Constant { multiplier } => base * multiplier,
            RateProfile::Sinusoid { amplitude, floor_fraction, .. } => {
                (floor_fraction * base).max(base + amplitude.abs())
            }
            RateProfile::LinearDecay { slope, floor_fraction } => {
                (floor_fraction * base).max(if slope >= 0.0 { base } else { f64::INFINITY })
            }
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = match *self {
            RateProfile::Constant { multiplier } => multiplier > 0.0 && multiplier.is_finite(),
            RateProfile::Sinusoid { amplitude, omega, floor_fraction } => {
                floor_fraction > 0.0 && amplitude.is_finite() && omega.is_finite() && floor_fraction.is_finite()
            }
            RateProfile::LinearDecay { slope, floor_fraction } => {
                floor_fraction > 0.0 && slope >= 0.0 && slope.is_finite() && floor_fraction.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(EngineError::ScheduleNonPositive(format!("{self:?}")))
        }
    }
}

/// Per-true-class rate schedules. Arrival profiles act on `λ p_k`, service
/// profiles on `μ_k`, evaluated at each job's arrival time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub arrivals: Option<Vec<RateProfile>>,
    pub services: Option<Vec<RateProfile>>,
}

/// A prescribed arrival for trace replay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceArrival {
    pub time: f64,
    pub true_class: usize,
    pub predicted_class: usize,
    pub service: f64,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub max_events: u64,
    pub schedule: RateSchedule,
    /// Record the per-(true, predicted) composition at grid points.
    pub record_composition: bool,
    /// Replay these arrivals (sorted by time) instead of sampling.
    pub trace: Option<Vec<TraceArrival>>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            max_events: DEFAULT_MAX_EVENTS,
            schedule: RateSchedule::default(),
            record_composition: true,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub id: u64,
    pub arrival_time: f64,
    pub true_class: usize,
    pub predicted_class: usize,
    pub service_req: f64,
    pub remaining: f64,
    pub completion_time: Option<f64>,
}

impl Job {
    pub fn sojourn(&self) -> Option<f64> {
        self.completion_time.map(|c| c - self.arrival_time)
    }
}

/// Time series sampled on a uniform grid over `[0, T]`. Values are left
/// limits: an event at exactly a grid time is applied after sampling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Curves {
    pub times: Vec<f64>,
    /// `queue_lengths[i][l]` = Ñ_l(times[i]).
    pub queue_lengths: Vec<Vec<u32>>,
    pub workload: Vec<f64>,
    /// Remaining work per predicted class.
    pub class_workload: Vec<Vec<f64>>,
    /// Row-major K×K counts Ñ_kl per grid point (empty if not recorded).
    pub composition: Vec<Vec<u32>>,
}

/// Exact time integrals over `[0, T]` accumulated event by event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathIntegrals {
    /// ∫ Ñ_l dt per predicted class.
    pub queue_length: Vec<f64>,
    /// ∫ Ñ_kl dt, row-major by (true, predicted).
    pub composition: Vec<f64>,
    /// ∫ W_+ dt.
    pub workload: f64,
    /// ∫ W_+² dt.
    pub workload_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub jobs: Vec<Job>,
    pub curves: Curves,
    pub integrals: PathIntegrals,
    /// W_+ immediately after each arrival, in arrival order.
    pub arrival_workload: Vec<f64>,
    pub num_classes: usize,
    pub horizon: f64,
    pub seed: u64,
    pub event_count: u64,
}

impl PathResult {
    pub fn completed(&self) -> impl Iterator<Item = &Job> {
        self.jobs.iter().filter(|j| j.completion_time.is_some())
    }

    pub fn write_jobs_csv<W: Write>(&self, out: W) -> Result<(), EngineError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "arrival", "k", "l", "service", "completion", "sojourn"])?;
        for j in &self.jobs {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                j.id.to_string(),
                j.arrival_time.to_string(),
                (j.true_class + 1).to_string(),
                (j.predicted_class + 1).to_string(),
                j.service_req.to_string(),
                opt(j.completion_time),
                opt(j.sojourn()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<(), EngineError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.num_classes).map(|l| format!("N_{l}")));
        header.push("W_plus".into());
        w.write_record(&header)?;
        for (i, t) in self.curves.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.curves.queue_lengths[i].iter().map(|n| n.to_string()));
            row.push(self.curves.workload[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Queue contents at an instant.
#[derive(Debug, Clone)]
pub struct QueueState {
    num_classes: usize,
    visibility: Visibility,
    /// FIFO of job indices per visible class.
    queues: Vec<VecDeque<usize>>,
    /// Present jobs per predicted class.
    predicted_counts: Vec<usize>,
    /// Present jobs per (true, predicted) pair, row-major.
    composition: Vec<usize>,
    visible_counts: Vec<usize>,
    head_arrival: Vec<f64>,
    class_work: Vec<f64>,
    total_work: f64,
    in_service: Option<usize>,
    clock: f64,
}

impl QueueState {
    fn new(num_classes: usize, visibility: Visibility) -> Self {
        QueueState {
            num_classes,
            visibility,
            queues: vec![VecDeque::new(); num_classes],
            predicted_counts: vec![0; num_classes],
            composition: vec![0; num_classes * num_classes],
            visible_counts: vec![0; num_classes],
            head_arrival: vec![f64::INFINITY; num_classes],
            class_work: vec![0.0; num_classes],
            total_work: 0.0,
            in_service: None,
            clock: 0.0,
        }
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn predicted_counts(&self) -> &[usize] {
        &self.predicted_counts
    }

    pub fn total_workload(&self) -> f64 {
        self.total_work
    }

    pub fn present(&self) -> usize {
        self.visible_counts.iter().sum()
    }

    fn snapshot(&self) -> QueueSnapshot<'_> {
        QueueSnapshot {
            visibility: self.visibility,
            counts: &self.visible_counts,
            head_arrival: &self.head_arrival,
            in_service: self.in_service,
        }
    }
}

/// Present jobs counted by (true class, predicted class); column sums equal
/// the predicted-class queue lengths.
pub fn composition_snapshot(state: &QueueState) -> Vec<Vec<usize>> {
    let k = state.num_classes;
    (0..k).map(|i| state.composition[i * k..(i + 1) * k].to_vec()).collect()
}

/// Generates arrivals in time order.
struct ArrivalSource<'a> {
    config: &'a SystemConfig,
    schedule: Option<&'a [RateProfile]>,
    max_total: f64,
    interarrival: ChaCha8Rng,
    class_rng: ChaCha8Rng,
    service_rng: ChaCha8Rng,
    classify_rng: ChaCha8Rng,
    thinning: ChaCha8Rng,
    clock: f64,
    next_id: u64,
}

/// A generated job before it enters the queue: (arrival, true, predicted, unit service draw).
type Arrival = (f64, usize, usize, f64);

impl<'a> ArrivalSource<'a> {
    fn new(config: &'a SystemConfig, schedule: Option<&'a [RateProfile]>, seed: u64) -> Self {
        let max_total = match schedule {
            Some(profiles) => profiles.iter().zip(config.class_rates()).map(|(p, base)| p.max_rate(base)).sum(),
            None => config.lambda,
        };
        ArrivalSource {
            config,
            schedule,
            max_total,
            interarrival: substream(seed, stream::INTERARRIVAL),
            class_rng: substream(seed, stream::TRUE_CLASS),
            service_rng: substream(seed, stream::SERVICE),
            classify_rng: substream(seed, stream::CLASSIFICATION),
            thinning: substream(seed, stream::THINNING),
            clock: 0.0,
            next_id: 0,
        }
    }

    fn next(&mut self) -> Option<Arrival> {
        let horizon = self.config.horizon;
        let true_class = loop {
            let gap = match self.schedule {
                Some(_) => -open_uniform(&mut self.interarrival).ln() / self.max_total,
                None => unit_draw(self.config.arrival_dist, &mut self.interarrival) / self.config.lambda,
            };
            self.clock += gap;
            if self.clock > horizon {
                return None;
            }
            match self.schedule {
                None => break inverse_cdf(&self.config.prevalences, self.class_rng.random::<f64>()),
                Some(profiles) => {
                    let u = self.thinning.random::<f64>() * self.max_total;
                    let mut acc = 0.0;
                    let mut chosen = None;
                    for (k, (p, base)) in profiles.iter().zip(self.config.class_rates()).enumerate() {
                        acc += p.rate(base, self.clock);
                        if u < acc {
                            chosen = Some(k);
                            break;
                        }
                    }
                    if let Some(k) = chosen {
                        break k;
                    }
                }
            }
        };
        let unit = unit_draw(self.config.service_dist, &mut self.service_rng);
        let predicted = sample_classification(true_class, &self.config.confusion, &mut self.classify_rng);
        self.next_id += 1;
        Some((self.clock, true_class, predicted, unit))
    }
}

struct Recorder {
    grid: Vec<f64>,
    next_grid: usize,
    curves: Curves,
    integrals: PathIntegrals,
    record_composition: bool,
}

impl Recorder {
    /// Accounts for `[state.clock, target]` with the in-service job draining
    /// at unit rate; `served` is the predicted class of that job.
    fn advance(&mut self, state: &QueueState, served: Option<usize>, target: f64) {
        let k = state.num_classes;
        let start = state.clock;
        while self.next_grid < self.grid.len() && self.grid[self.next_grid] <= target {
            let g = self.grid[self.next_grid];
            let drained = if served.is_some() { g - start } else { 0.0 };
            let c = &mut self.curves;
            c.times.push(g);
            c.queue_lengths.push(state.predicted_counts.iter().map(|&n| n as u32).collect());
            c.workload.push((state.total_work - drained).max(0.0));
            let mut cw = state.class_work.clone();
            if let Some(l) = served {
                cw[l] = (cw[l] - drained).max(0.0);
            }
            c.class_workload.push(cw);
            if self.record_composition {
                c.composition.push(state.composition.iter().map(|&n| n as u32).collect());
            }
            self.next_grid += 1;
        }
        let dt = target - start;
        if dt <= 0.0 {
            return;
        }
        let it = &mut self.integrals;
        for l in 0..k {
            it.queue_length[l] += state.predicted_counts[l] as f64 * dt;
        }
        for (acc, &n) in it.composition.iter_mut().zip(&state.composition) {
            *acc += n as f64 * dt;
        }
        if served.is_some() {
            let w0 = state.total_work;
            let w1 = (w0 - dt).max(0.0);
            it.workload += 0.5 * (w0 + w1) * dt;
            it.workload_sq += (w0 * w0 * w0 - w1 * w1 * w1) / 3.0;
        }
    }
}

/// Simulates one path over `[0, config.horizon]`.
pub fn run_path(
    config: &SystemConfig,
    policy: &PolicyRef,
    seed: u64,
    sampling_grid: usize,
) -> Result<PathResult, EngineError> {
    run_path_with(config, policy, seed, sampling_grid, &EngineOptions::default())
}

pub fn run_path_with(
    config: &SystemConfig,
    policy: &PolicyRef,
    seed: u64,
    sampling_grid: usize,
    options: &EngineOptions,
) -> Result<PathResult, EngineError> {
    if sampling_grid < 2 {
        return Err(EngineError::BadGrid(sampling_grid));
    }
    let k = config.num_classes();
    let schedule = &options.schedule;
    if let Some(profiles) = &schedule.arrivals {
        if config.arrival_dist != DistributionKind::Exponential {
            return Err(EngineError::NonPoissonSchedule);
        }
        if profiles.len() != k {
            return Err(EngineError::ScheduleNonPositive(format!("expected {k} arrival profiles")));
        }
        profiles.iter().try_for_each(RateProfile::validate)?;
    }
    if let Some(profiles) = &schedule.services {
        if profiles.len() != k {
            return Err(EngineError::ScheduleNonPositive(format!("expected {k} service profiles")));
        }
        profiles.iter().try_for_each(RateProfile::validate)?;
    }

    if policy.num_classes() != k {
        return Err(EngineError::ClassMismatch { policy: policy.num_classes(), config: k });
    }
    let horizon = config.horizon;
    let visibility = policy.visibility();
    let mut source = ArrivalSource::new(config, schedule.arrivals.as_deref(), seed);
    let mut trace = options.trace.as_ref().map(|t| t.iter().filter(|a| a.time <= horizon));
    let mut draw = move || match trace.as_mut() {
        // trace services are absolute; a unit draw of `service * μ_k` reproduces them
        Some(it) => {
            it.next().map(|a| (a.time, a.true_class, a.predicted_class, a.service * config.service_rates[a.true_class]))
        }
        None => source.next(),
    };
    let mut state = QueueState::new(k, visibility);
    let mut recorder = Recorder {
        grid: (0..sampling_grid).map(|i| horizon * i as f64 / (sampling_grid - 1) as f64).collect(),
        next_grid: 0,
        curves: Curves::default(),
        integrals: PathIntegrals { queue_length: vec![0.0; k], composition: vec![0.0; k * k], ..Default::default() },
        record_composition: options.record_composition,
    };
    let mut jobs: Vec<Job> = Vec::new();
    let mut started: Vec<bool> = Vec::new();
    let mut unit_service: Vec<f64> = Vec::new();
    let mut arrival_workload = Vec::new();
    let mut next_arrival = draw();
    let mut events: u64 = 0;

    let visible_class = |job: &Job| match visibility {
        Visibility::TrueClass => job.true_class,
        Visibility::PredictedClass => job.predicted_class,
    };

    loop {
        let serving = state.in_service.map(|c| state.queues[c][0]);
        let completion_at = serving.map(|j| state.clock + jobs[j].remaining);
        let arrival_at = next_arrival.map(|a| a.0);
        let served_pred = serving.map(|j| jobs[j].predicted_class);

        let is_completion = match (completion_at, arrival_at) {
            (Some(c), Some(a)) => c <= a && c <= horizon,
            (Some(c), None) => c <= horizon,
            _ => false,
        };
        let target = if is_completion {
            completion_at.unwrap()
        } else {
            match arrival_at {
                Some(a) => a,
                None => horizon,
            }
        };

        recorder.advance(&state, served_pred, target);
        if let Some(j) = serving {
            let dt = target - state.clock;
            let job = &mut jobs[j];
            job.remaining -= dt;
            state.total_work -= dt;
            state.class_work[job.predicted_class] -= dt;
        }
        state.clock = target;

        if !is_completion && arrival_at.is_none() {
            break;
        }
        events += 1;
        if events > options.max_events {
            return Err(EngineError::EventOverflow { cap: options.max_events });
        }

        if is_completion {
            let c = state.in_service.take().expect("completion without service");
            let j = state.queues[c].pop_front().expect("served job present");
            let job = &mut jobs[j];
            let residual = job.remaining;
            job.remaining = 0.0;
            job.completion_time = Some(target);
            let (true_class, predicted_class) = (job.true_class, job.predicted_class);
            state.total_work -= residual;
            state.class_work[predicted_class] -= residual;
            state.visible_counts[c] -= 1;
            state.predicted_counts[predicted_class] -= 1;
            state.composition[true_class * k + predicted_class] -= 1;
            state.head_arrival[c] = state.queues[c].front().map_or(f64::INFINITY, |&h| jobs[h].arrival_time);
            if state.predicted_counts[predicted_class] == 0 {
                state.class_work[predicted_class] = 0.0;
            }
            if state.visible_counts.iter().all(|&n| n == 0) {
                state.total_work = 0.0;
            }
        } else {
            let (t, true_class, predicted_class, unit) = next_arrival.take().unwrap();
            let mut rate = config.service_rates[true_class];
            if let Some(profiles) = &schedule.services {
                rate = profiles[true_class].rate(rate, t);
            }
            let service = unit / rate;
            let id = jobs.len();
            let job = Job {
                id: id as u64,
                arrival_time: t,
                true_class,
                predicted_class,
                service_req: service,
                remaining: service,
                completion_time: None,
            };
            let c = visible_class(&job);
            jobs.push(job);
            started.push(false);
            unit_service.push(unit);
            state.queues[c].push_back(id);
            if state.visible_counts[c] == 0 {
                state.head_arrival[c] = t;
            }
            state.visible_counts[c] += 1;
            state.predicted_counts[predicted_class] += 1;
            state.composition[true_class * k + predicted_class] += 1;
            state.total_work += service;
            state.class_work[predicted_class] += service;
            arrival_workload.push(state.total_work);
            next_arrival = draw();
        }

        match policy.decide(&state.snapshot()) {
            Decision::Idle => state.in_service = None,
            Decision::Serve(c) => {
                state.in_service = Some(c);
                let j = state.queues[c][0];
                if !started[j] {
                    started[j] = true;
                    if let Some(profiles) = &schedule.services {
                        let job = &mut jobs[j];
                        let rate = profiles[job.true_class].rate(config.service_rates[job.true_class], target);
                        let service = unit_service[j] / rate;
                        let delta = service - job.service_req;
                        job.service_req = service;
                        job.remaining = service;
                        state.total_work += delta;
                        state.class_work[job.predicted_class] += delta;
                    }
                }
            }
        }
    }

    Ok(PathResult {
        jobs,
        curves: recorder.curves,
        integrals: recorder.integrals,
        arrival_workload,
        num_classes: k,
        horizon,
        seed,
        event_count: events,
    })
}
