//! Bootstrap intervals, goodness-of-fit envelopes and derived measures.

mod bootstrap;
mod derived;
mod gof;

pub use bootstrap::{
    basic_interval, bootstrap_ci, BootstrapConfig, BootstrapResult, CiRow, MAX_FAILURE_SHARE, MIN_REPS,
};
pub use derived::{
    association_table, derived_measures, var_lambda_star, AssociationTable, DerivedMeasures, DyadMeasures, Measure,
};
pub use gof::{
    gof_envelope, gof_stats, log_odds, Bins, GofLayout, GofReport, GofRow, GofStats, DEFAULT_CUTOFF_MAX,
    GOF_STREAM_BASE, MIN_GOF_REPS,
};

use thiserror::Error;

use crate::em::EmError;
use crate::params::ParamError;
use crate::sampler::SampleError;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("the point fit did not converge")]
    NotConverged,
    #[error("{failures} of {reps} bootstrap replicates failed")]
    TooManyFailures { failures: usize, reps: usize },
    #[error("expected {expected} dyads, got {got}")]
    Length { got: usize, expected: usize },
    #[error(transparent)]
    Fit(#[from] EmError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Type-7 quantile of ascending `sorted`: linear interpolation between
/// order statistics at h = (n − 1)q. NaN for an empty slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
