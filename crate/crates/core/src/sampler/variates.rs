//! Gamma and beta variates.
//!
//! Gamma draws use Marsaglia–Tsang for shape ≥ 1 and the boost
//! `G(shape) = G(shape + 1) · U^{1/shape}` below that. The kernel works on
//! the log scale so shapes around 0.05 (where `U^{20}` routinely underflows)
//! still produce usable beta ratios.

use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};

/// `ln G` for G ~ Gamma(shape, scale 1).
pub fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let boost: f64 = Open01.sample(rng);
        return ln_gamma_variate(shape + 1.0, rng) + boost.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = Open01.sample(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// G ~ Gamma(shape, scale 1).
pub fn gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    ln_gamma_variate(shape, rng).exp()
}

/// ρ ~ Beta(a, b) as a ratio of gamma draws; returns `(ρ, 1 - ρ)`, each
/// accurate near its own zero.
pub fn beta_variate<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> (f64, f64) {
    let la = ln_gamma_variate(a, rng);
    let lb = ln_gamma_variate(b, rng);
    let d = lb - la;
    (1.0 / (1.0 + d.exp()), 1.0 / (1.0 + (-d).exp()))
}
