//! Gauss ₂F₁ and generalized ₃F₂ hypergeometric series.
//!
//! The partial sums are kept as `mantissa * exp(log_scale)` so that the
//! likelihood can take logs of values far outside the f64 range.

use super::SpecFunError;

/// Series truncation: relative size of the last term.
pub const SERIES_REL_TOL: f64 = 1e-15;
/// Series truncation: hard cap on the number of terms.
pub const SERIES_MAX_TERMS: usize = 10_000;

const RESCALE_ABOVE: f64 = 1e200;

/// A real number stored as `mantissa * exp(log_scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaled {
    pub mantissa: f64,
    pub log_scale: f64,
}

impl Scaled {
    pub fn value(self) -> f64 {
        self.mantissa * self.log_scale.exp()
    }

    pub fn ln(self) -> Result<f64, SpecFunError> {
        if self.mantissa > 0.0 {
            Ok(self.mantissa.ln() + self.log_scale)
        } else {
            Err(SpecFunError::NonPositive)
        }
    }
}

/// Sums `Σ_k t_k` where `t_0 = 1` and `t_{k+1} = t_k * ratio(k)`.
fn sum_series(ratio: impl Fn(f64) -> f64) -> Result<Scaled, SpecFunError> {
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut log_scale = 0.0f64;
    for k in 0..SERIES_MAX_TERMS {
        term *= ratio(k as f64);
        if !term.is_finite() {
            return Err(SpecFunError::NotConverged { terms: k });
        }
        sum += term;
        if term == 0.0 || term.abs() <= SERIES_REL_TOL * sum.abs() {
            return Ok(Scaled { mantissa: sum, log_scale });
        }
        if sum.abs() > RESCALE_ABOVE {
            sum /= RESCALE_ABOVE;
            term /= RESCALE_ABOVE;
            log_scale += RESCALE_ABOVE.ln();
        }
    }
    Err(SpecFunError::NotConverged { terms: SERIES_MAX_TERMS })
}

/// Defining power series of ₂F₁(a, b; c; z) for |z| < 1, no transformation.
pub fn hyp2f1_series(a: f64, b: f64, c: f64, z: f64) -> Result<Scaled, SpecFunError> {
    if !(c > 0.0) {
        return Err(SpecFunError::Domain { function: "hyp2f1", value: c });
    }
    if !(z.abs() < 1.0) {
        return Err(SpecFunError::Domain { function: "hyp2f1", value: z });
    }
    if z == 0.0 {
        return Ok(Scaled { mantissa: 1.0, log_scale: 0.0 });
    }
    sum_series(|k| (a + k) * (b + k) / ((c + k) * (k + 1.0)) * z)
}

/// ₂F₁(a, b; c; z) for `c > 0` and `z < 1`, in scaled form.
///
/// `z ∈ [0, 1)` uses the power series directly; `z < 0` goes through the
/// Pfaff transformation `(1 - z)^{-a} ₂F₁(a, c - b; c; z / (z - 1))`, which
/// lands in `(0, 1)`.
pub fn hyp2f1_scaled(a: f64, b: f64, c: f64, z: f64) -> Result<Scaled, SpecFunError> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(SpecFunError::Domain { function: "hyp2f1", value: c });
    }
    if !(z < 1.0) || !z.is_finite() {
        return Err(SpecFunError::Domain { function: "hyp2f1", value: z });
    }
    if z >= 0.0 {
        hyp2f1_series(a, b, c, z)
    } else {
        let w = z / (z - 1.0);
        let inner = hyp2f1_series(a, c - b, c, w)?;
        Ok(Scaled { mantissa: inner.mantissa, log_scale: inner.log_scale - a * (-z).ln_1p() })
    }
}

/// ₂F₁(a, b; c; z) for `c > 0` and `z < 1`.
pub fn hyp2f1(a: f64, b: f64, c: f64, z: f64) -> Result<f64, SpecFunError> {
    hyp2f1_scaled(a, b, c, z).map(Scaled::value)
}

/// ln ₂F₁(a, b; c; z); fails if the function value is not positive.
pub fn ln_hyp2f1(a: f64, b: f64, c: f64, z: f64) -> Result<f64, SpecFunError> {
    hyp2f1_scaled(a, b, c, z)?.ln()
}

/// ₃F₂(a1, a2, a3; b1, b2; z) by its power series, |z| < 1 only.
///
/// `|z| >= 1` returns [`SpecFunError::FallbackRequired`]: callers are
/// expected to switch to an integral representation.
pub fn hyp3f2(a1: f64, a2: f64, a3: f64, b1: f64, b2: f64, z: f64) -> Result<f64, SpecFunError> {
    if !(b1 > 0.0) {
        return Err(SpecFunError::Domain { function: "hyp3f2", value: b1 });
    }
    if !(b2 > 0.0) {
        return Err(SpecFunError::Domain { function: "hyp3f2", value: b2 });
    }
    if !z.is_finite() || z.abs() >= 1.0 {
        return Err(SpecFunError::FallbackRequired { z });
    }
    if z == 0.0 {
        return Ok(1.0);
    }
    sum_series(|k| (a1 + k) * (a2 + k) * (a3 + k) / ((b1 + k) * (b2 + k) * (k + 1.0)) * z).map(Scaled::value)
}
