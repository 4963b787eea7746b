//! Special functions and integral fallbacks for the E-step and likelihood.

mod gamma;
mod hyper;
mod quad;

pub use gamma::{digamma, ln_beta, ln_gamma, ln_poch, trigamma};
#[allow(unused_imports)]
pub(crate) use gamma::{
    digamma_unchecked, ln_beta_unchecked, ln_gamma_unchecked, ln_poch_unchecked, trigamma_unchecked,
};
pub use hyper::{hyp2f1, hyp2f1_scaled, hyp2f1_series, hyp3f2, ln_hyp2f1, Scaled, SERIES_MAX_TERMS, SERIES_REL_TOL};
pub use quad::{
    beta_expectation, beta_ln_expectation_exp, gauss_legendre, integrate_interval, log_density_moments, QuadratureSpec,
    PANEL_ORDER,
};
pub(crate) use quad::{ln_sigmoid, split_logit};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::variates::beta_variate;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SpecFunError {
    #[error("{function}: argument {value} outside the domain")]
    Domain { function: &'static str, value: f64 },
    #[error("series did not converge after {terms} terms")]
    NotConverged { terms: usize },
    #[error("fallback required: |z| = {} >= 1", z.abs())]
    FallbackRequired { z: f64 },
    #[error("function value is not positive")]
    NonPositive,
    #[error("integrand is not finite and positive on (0, 1)")]
    InvalidIntegrand,
    #[error("invalid integration spec: {0}")]
    InvalidSpec(String),
}

/// Beta law in shape form; construct from mean and concentration with
/// [`BetaLaw::from_mean`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaLaw {
    pub a: f64,
    pub b: f64,
}

impl BetaLaw {
    pub fn from_shapes(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn from_mean(mean: f64, concentration: f64) -> Self {
        Self { a: mean * concentration, b: (1.0 - mean) * concentration }
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// Monte Carlo settings: sample size and an explicit seed/stream pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McSpec {
    pub sample_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        Self { sample_size: 100_000, seed: 0, stream: 0 }
    }
}

impl McSpec {
    pub const MIN_SAMPLE_SIZE: usize = 10_000;

    pub fn validate(&self) -> Result<(), SpecFunError> {
        if self.sample_size < Self::MIN_SAMPLE_SIZE {
            return Err(SpecFunError::InvalidSpec(format!(
                "Monte Carlo sample size must be at least {}, got {}",
                Self::MIN_SAMPLE_SIZE,
                self.sample_size
            )));
        }
        Ok(())
    }
}

/// How to evaluate an expectation that has no usable series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrator {
    Quadrature(QuadratureSpec),
    MonteCarlo(McSpec),
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Quadrature(QuadratureSpec::default())
    }
}

/// A numerical expectation; `std_error` is zero for quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// `E[ln(slope·ρ + intercept)]` for ρ ~ `law`.
///
/// The integrand is evaluated as `intercept·(1-ρ) + (slope+intercept)·ρ` so
/// both endpoint values must be positive.
pub fn expect_log_linear(
    slope: f64,
    intercept: f64,
    law: BetaLaw,
    integrator: &Integrator,
) -> Result<Estimate, SpecFunError> {
    let at_one = slope + intercept;
    if !(intercept > 0.0) || !(at_one > 0.0) || !at_one.is_finite() {
        return Err(SpecFunError::InvalidIntegrand);
    }
    for v in [law.a, law.b] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(SpecFunError::Domain { function: "expect_log_linear", value: v });
        }
    }
    if slope == 0.0 {
        return Ok(Estimate { value: intercept.ln(), std_error: 0.0 });
    }
    let integrand = |p: f64, q: f64| (intercept * q + at_one * p).ln();
    match integrator {
        Integrator::Quadrature(spec) => {
            let value = beta_expectation(law.a, law.b, integrand, spec)?;
            Ok(Estimate { value, std_error: 0.0 })
        }
        Integrator::MonteCarlo(spec) => {
            spec.validate()?;
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
            rng.set_stream(spec.stream);
            let n = spec.sample_size as f64;
            let (mut mean, mut m2) = (0.0f64, 0.0f64);
            for k in 0..spec.sample_size {
                let (p, q) = beta_variate(law.a, law.b, &mut rng);
                let v = integrand(p, q);
                let delta = v - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (v - mean);
            }
            let std_error = (m2 / (n - 1.0) / n).sqrt();
            Ok(Estimate { value: mean, std_error })
        }
    }
}
