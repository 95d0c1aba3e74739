//! Panel-data policy impact engine.
//!
//! Builds balanced municipality-by-week crime-reporting panels from
//! event-level records, estimates weighted two-way fixed-effects
//! difference-in-differences models with cluster-robust inference, traces
//! dynamics with lead/lag event studies, diagnoses staggered-adoption
//! weighting, projects counterfactual baselines selected by prediction
//! error, and attaches block-bootstrap confidence intervals — all
//! deterministic under a fixed seed.

pub mod bootstrap;
pub mod config;
pub mod counterfactual;
pub mod dates;
pub mod did;
pub mod diagnostics;
pub mod error;
pub mod eventstudy;
pub mod fe;
pub mod ingest;
pub mod panel;
pub mod report;
pub mod synth;
pub mod treatments;

pub use error::{Error, Result};
pub use panel::Panel;
