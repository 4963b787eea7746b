//! Parametric bootstrap with basic intervals on the unconstrained scale.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::InteractionData;
use crate::em::{fit_from, FitConfig, FitResult};
use crate::params::ParamSet;
use crate::sampler::{sample_network, SimConfig};

use super::derived::association_table;
use super::{quantile, InferenceError};

/// Smallest number of replicates accepted.
pub const MIN_REPS: usize = 50;
/// Share of failed replicates above which the bootstrap aborts.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub level: f64,
    pub seed: u64,
    /// Settings for the replicate fits, which start from the fitted values.
    pub fit: FitConfig,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(InferenceError::InvalidConfig(format!("level must lie in (0, 1), got {}", self.level)));
        }
        let needed = ((2.0 / (1.0 - self.level)).ceil() as usize).max(MIN_REPS);
        if self.reps < needed {
            return Err(InferenceError::InvalidConfig(format!(
                "{} replicates requested, at least {needed} needed at level {}",
                self.reps, self.level
            )));
        }
        Ok(())
    }
}

/// One interval row on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiRow {
    pub parameter: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub level: f64,
    pub reps: usize,
    /// Replicates dropped because the fit failed or did not converge.
    pub failures: usize,
    /// Surviving replicates × free parameters, unconstrained scale.
    pub replicate_estimates: Vec<Vec<f64>>,
    /// Free parameters, in [`ParamSet::to_unconstrained`] order.
    pub parameters: Vec<CiRow>,
    /// Association measures, intervals computed on the log scale.
    pub measures: Vec<CiRow>,
}

/// Basic bootstrap limits (2ψ̂ − q_{1−a/2}, 2ψ̂ − q_{a/2}) with a = 1 − level
/// and type-7 quantiles. Nothing is clamped, so the interval may exclude
/// the point estimate.
pub fn basic_interval(point: f64, replicates: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let a = 1.0 - level;
    let lo = quantile(&sorted, a / 2.0);
    let hi = quantile(&sorted, 1.0 - a / 2.0);
    (2.0 * point - hi, 2.0 * point - lo)
}

fn column(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k]).collect()
}

/// Resamples `reps` networks from `fit.params` over the dyads of `data`,
/// refits each from `fit.params`, and forms basic intervals for every
/// free parameter and association measure.
///
/// Replicate `b` draws from stream `(seed, b)`, so results do not depend on
/// the thread count.
pub fn bootstrap_ci(
    data: &InteractionData,
    fit: &FitResult,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult, InferenceError> {
    cfg.validate()?;
    if !fit.converged {
        return Err(InferenceError::NotConverged);
    }
    let p_hat = &fit.params;
    let s = p_hat.num_blocks();
    let outcomes: Vec<Result<Option<ParamSet>, InferenceError>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|b| {
            let sim = sample_network(data, p_hat, SimConfig::new(cfg.seed, b))?;
            match fit_from(&sim, p_hat.clone(), Vec::new(), &cfg.fit) {
                Ok(f) if f.converged => Ok(Some(f.params)),
                Ok(_) => Ok(None),
                Err(e) if e.is_internal() => Err(e.into()),
                Err(_) => Ok(None),
            }
        })
        .collect();
    let mut survivors = Vec::with_capacity(cfg.reps);
    for o in outcomes {
        if let Some(p) = o? {
            survivors.push(p);
        }
    }
    let failures = cfg.reps - survivors.len();
    if failures as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
        return Err(InferenceError::TooManyFailures { failures, reps: cfg.reps });
    }

    let labels = data.partition().block_labels();
    let names = p_hat.coordinate_names(labels);
    let point_u = p_hat.to_unconstrained();
    let reps_u: Vec<Vec<f64>> = survivors.iter().map(|p| p.to_unconstrained()).collect();
    let mut lower_u = Vec::with_capacity(point_u.len());
    let mut upper_u = Vec::with_capacity(point_u.len());
    for (k, &psi) in point_u.iter().enumerate() {
        let (lo, hi) = basic_interval(psi, &column(&reps_u, k), cfg.level);
        lower_u.push(lo);
        upper_u.push(hi);
    }
    let point_n = ParamSet::natural_scale(s, &point_u)?;
    let lower_n = ParamSet::natural_scale(s, &lower_u)?;
    let upper_n = ParamSet::natural_scale(s, &upper_u)?;
    let parameters = names
        .into_iter()
        .enumerate()
        .map(|(k, parameter)| CiRow { parameter, point: point_n[k], lower: lower_n[k], upper: upper_n[k] })
        .collect();

    let point_m = association_table(p_hat, labels).measures();
    let reps_m: Vec<Vec<f64>> = survivors
        .iter()
        .map(|p| association_table(p, labels).measures().iter().map(|m| m.value.ln()).collect())
        .collect();
    let measures = point_m
        .into_iter()
        .enumerate()
        .map(|(k, m)| {
            let (lo, hi) = basic_interval(m.value.ln(), &column(&reps_m, k), cfg.level);
            CiRow { parameter: m.name, point: m.value, lower: lo.exp(), upper: hi.exp() }
        })
        .collect();

    Ok(BootstrapResult {
        level: cfg.level,
        reps: cfg.reps,
        failures,
        replicate_estimates: reps_u,
        parameters,
        measures,
    })
}

impl BootstrapResult {
    /// Parameter rows first, then measure rows.
    pub fn rows(&self) -> impl Iterator<Item = &CiRow> {
        self.parameters.iter().chain(&self.measures)
    }

    /// `parameter,point,lower,upper`, one row per parameter or measure.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), InferenceError> {
        let mut w = csv::Writer::from_writer(writer);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush().map_err(InferenceError::Io)?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "level": self.level,
            "reps": self.reps,
            "failures": self.failures,
            "parameters": self.parameters,
            "measures": self.measures,
            "replicate_estimates": self.replicate_estimates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_gives_degenerate_interval() {
        let (lo, hi) = basic_interval(0.7, &[0.7; 60], 0.95);
        assert_eq!((lo, hi), (0.7, 0.7));
    }

    #[test]
    fn reflects_replicate_quantiles() {
        // replicates 1..=101 → q_0.025 = 3.5, q_0.975 = 98.5
        let reps: Vec<f64> = (1..=101).map(f64::from).collect();
        let (lo, hi) = basic_interval(10.0, &reps, 0.95);
        assert!((lo - (20.0 - 98.5)).abs() < 1e-12 && (hi - (20.0 - 3.5)).abs() < 1e-12);
    }

    #[test]
    fn log_endpoints_exponentiate() {
        let reps: Vec<f64> = (0..200).map(|k| 1.0 + 0.01 * k as f64).collect();
        let logs: Vec<f64> = reps.iter().map(|x: &f64| x.ln()).collect();
        let (lo, hi) = basic_interval(1.8f64.ln(), &logs, 0.9);
        let nat = ParamSet::natural_scale(1, &[lo, 0.0, 0.0]).unwrap();
        assert_eq!(nat[0], lo.exp());
        assert!(hi.exp() > lo.exp());
    }

    #[test]
    fn config_checks() {
        let base = BootstrapConfig { reps: 50, level: 0.95, seed: 1, fit: FitConfig::default() };
        assert!(base.validate().is_ok());
        assert!(BootstrapConfig { reps: 49, ..base }.validate().is_err());
        assert!(BootstrapConfig { level: 0.99, ..base }.validate().is_err());
        assert!(BootstrapConfig { level: 1.0, ..base }.validate().is_err());
    }
}
