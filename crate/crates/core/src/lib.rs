//! Battery life prediction from smartphone telemetry traces.
//!
//! The pipeline follows four phases: ingest raw telemetry logs into per-user
//! traces, segment battery streams into discharge sessions, simulate user
//! queries and extract feature groups F1-F21, then train regression models
//! and evaluate them with censoring-aware metrics (RMSE, Kendall's Tau,
//! concordance index).
//!
//! Sessions that end before the battery reaches the low-battery threshold
//! are right-censored: their remaining life is only bounded from below.
//! The evaluation module scores such records through the concordance index
//! rather than discarding them.

pub mod config;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod model;
pub mod query;
pub mod rng;
pub mod session;
pub mod synth;
