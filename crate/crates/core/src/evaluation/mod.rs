//! Reconstruction metrics and two-stage experiment reports.

mod experiment;
mod metrics;

pub use experiment::*;
pub use metrics::*;
