//! Scheduling a multiclass queue from predicted job classes.
//!
//! Jobs carry a true class that determines service and cost, and a predicted
//! class produced by a noisy classifier. Schedulers only see predictions.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod cost;
pub mod engine;
pub mod httheory;
pub mod ingest;
pub mod model;
pub mod policies;
pub mod triage;
