//! Posterior expectations per dyad and the observed-data likelihood.
//!
//! Integrating γ out of the complete likelihood leaves the marginal posterior
//! of the arc share
//!
//! ```text
//! p(ρ | x) ∝ ρ^{a-1} (1-ρ)^{b-1} (1 - zρ)^{-n}
//! ```
//!
//! with `a = x_ij + φπ`, `b = x_ji + φ(1-π)`, `n = x_ij + x_ji + ν` and
//! `z = (τ_ji - τ_ij)/(τ_ji + ν)`, and γ | ρ, x ~ Gamma(n, rate D(ρ)) with
//! `D(ρ) = (τ_ji + ν)(1 - zρ)`. Expanding `(1 - zρ)^{-n}` writes the
//! posterior of ρ as a mixture of Beta(a + k, b) laws whose weights are the
//! terms of ₂F₁(n, a; a + b; z); every expectation is a weighted sum over the
//! same terms. The dyad is mirrored when `z < 0`, so the weights are always
//! positive.
//!
//! [`EStepForm::Factorized`] instead treats ρ | x as Beta(a, b) and γ | ρ, x as
//! above. That factorization is exact only when τ_ij = τ_ji.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dyad, InteractionData};
use crate::params::ParamSet;
use crate::sampler::variates::beta_variate;
use crate::specfun::{
    digamma_unchecked, expect_log_linear, hyp2f1, hyp3f2, ln_gamma_unchecked, ln_poch_unchecked, ln_sigmoid,
    log_density_moments, split_logit, BetaLaw, Integrator, SpecFunError, SERIES_MAX_TERMS,
};

use super::EmError;

/// Which posterior the E-step integrates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepForm {
    /// The joint posterior implied by the complete likelihood.
    #[default]
    Exact,
    /// ρ | x ~ Beta(a, b), γ | ρ, x ~ Gamma(n, D(ρ)).
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EStepOptions {
    pub form: EStepForm,
    /// Used when a series does not converge. Monte Carlo streams are keyed
    /// by dyad index.
    pub fallback: Integrator,
}

/// Model quantities for one dyad, in its canonical orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyadModel {
    pub tau_ij: f64,
    pub tau_ji: f64,
    pub nu: f64,
    pub pi: f64,
    pub phi: f64,
}

impl DyadModel {
    pub fn new(p: &ParamSet, r: usize, s: usize) -> Self {
        Self { tau_ij: p.tau(r, s), tau_ji: p.tau(s, r), nu: p.nu(r, s), pi: p.pi(r, s), phi: p.phi(r, s) }
    }
}

/// The five posterior expectations of one dyad plus its log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyadExpectations {
    /// E[ln ρ_ij | x]
    pub rho_log_ij: f64,
    /// E[ln(1 - ρ_ij) | x]
    pub rho_log_ji: f64,
    /// E[ρ_ij γ | x]
    pub gamma_arc_ij: f64,
    /// E[(1 - ρ_ij) γ | x]
    pub gamma_arc_ji: f64,
    /// E[ln γ | x]
    pub log_gamma: f64,
    /// E[ρ_ij | x]
    pub rho_mean_ij: f64,
    /// ln P(x_ij, x_ji)
    pub loglik: f64,
    pub fallback_used: bool,
}

impl DyadExpectations {
    /// E[γ | x], defined as the sum of the two arc terms.
    pub fn gamma_dyad(&self) -> f64 {
        self.gamma_arc_ij + self.gamma_arc_ji
    }
}

/// Posterior expectations for every dyad, in dyad order.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepState {
    pub rho_log_ij: Vec<f64>,
    pub rho_log_ji: Vec<f64>,
    pub gamma_dyad: Vec<f64>,
    pub gamma_arc_ij: Vec<f64>,
    pub gamma_arc_ji: Vec<f64>,
    pub log_gamma_dyad: Vec<f64>,
    /// E[ρ_ij | x]
    pub rho_mean_ij: Vec<f64>,
    pub fallback_used: Vec<bool>,
    /// Observed-data log-likelihood at the parameters the state was built from.
    pub loglik: f64,
}

impl EStepState {
    pub fn fallback_count(&self) -> usize {
        self.fallback_used.iter().filter(|&&f| f).count()
    }

    pub fn len(&self) -> usize {
        self.gamma_dyad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma_dyad.is_empty()
    }

    pub fn dyad(&self, k: usize) -> DyadExpectations {
        DyadExpectations {
            rho_log_ij: self.rho_log_ij[k],
            rho_log_ji: self.rho_log_ji[k],
            gamma_arc_ij: self.gamma_arc_ij[k],
            gamma_arc_ji: self.gamma_arc_ji[k],
            log_gamma: self.log_gamma_dyad[k],
            rho_mean_ij: self.rho_mean_ij[k],
            loglik: f64::NAN,
            fallback_used: self.fallback_used[k],
        }
    }
}

const TERM_TOL: f64 = 1e-17;
const RESCALE: f64 = 1e200;

/// The dyad seen with the arc whose posterior weights are positive first.
#[derive(Debug, Clone, Copy)]
struct Oriented {
    a: f64,
    b: f64,
    n: f64,
    /// D at ρ = 0 and at ρ = 1.
    d0: f64,
    d1: f64,
    mirrored: bool,
}

impl Oriented {
    fn new(x_ij: u64, x_ji: u64, m: &DyadModel) -> Self {
        let a = x_ij as f64 + m.phi * m.pi;
        let b = x_ji as f64 + m.phi * (1.0 - m.pi);
        let n = (x_ij + x_ji) as f64 + m.nu;
        let (d0, d1) = (m.tau_ji + m.nu, m.tau_ij + m.nu);
        if d1 <= d0 {
            Self { a, b, n, d0, d1, mirrored: false }
        } else {
            Self { a: b, b: a, n, d0: d1, d1: d0, mirrored: true }
        }
    }

    fn z(&self) -> f64 {
        (self.d0 - self.d1) / self.d0
    }

    fn c(&self) -> f64 {
        self.a + self.b
    }
}

/// Expectations in the oriented frame ("first" is the arc whose share is ρ).
#[derive(Debug, Clone, Copy)]
struct Frame {
    ln_first: f64,
    ln_second: f64,
    first_gamma: f64,
    second_gamma: f64,
    log_gamma: f64,
    mean_first: f64,
    mean_second: f64,
    /// ln E_{Beta(a,b)}[(1 - zρ)^{-n}] = ln ₂F₁(n, a; a + b; z)
    ln_f: f64,
}

fn series_frame(o: &Oriented) -> Result<Frame, SpecFunError> {
    let (a, b, n, c, z) = (o.a, o.b, o.n, o.c(), o.z());
    let mut t = 1.0f64;
    let mut log_scale = 0.0f64;
    // H_a(k) - H_c(k) and H_n(k), with H_x(k) = Σ_{j<k} 1/(x + j)
    let (mut hd, mut hn) = (0.0f64, 0.0f64);
    let (mut s0, mut s_first, mut s_second, mut s_hd, mut s_hc, mut s_hn) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut s_mean, mut s_mean2) = (0.0f64, 0.0f64);
    let mut hc = 0.0f64;
    let mut done = false;
    for k in 0..SERIES_MAX_TERMS {
        let kf = k as f64;
        s0 += t;
        s_first += t * (n + kf) * (a + kf) / (c + kf);
        s_second += t * (n + kf) / (c + kf);
        s_mean += t * (a + kf) / (c + kf);
        s_mean2 += t / (c + kf);
        s_hd += t * hd;
        s_hc += t * hc;
        s_hn += t * hn;
        t *= (n + kf) * (a + kf) / ((c + kf) * (kf + 1.0)) * z;
        hd += b / ((a + kf) * (c + kf));
        hc += 1.0 / (c + kf);
        hn += 1.0 / (n + kf);
        if t * (1.0 + n + kf + hc + hn) <= TERM_TOL * s0 {
            done = true;
            break;
        }
        if s0 > RESCALE {
            for v in [
                &mut t,
                &mut s0,
                &mut s_first,
                &mut s_second,
                &mut s_hd,
                &mut s_hc,
                &mut s_hn,
                &mut s_mean,
                &mut s_mean2,
            ] {
                *v /= RESCALE;
            }
            log_scale += RESCALE.ln();
        }
        if !t.is_finite() {
            break;
        }
    }
    if !done {
        return Err(SpecFunError::NotConverged { terms: SERIES_MAX_TERMS });
    }
    let psi_c = digamma_unchecked(c);
    Ok(Frame {
        ln_first: digamma_unchecked(a) - psi_c + s_hd / s0,
        ln_second: digamma_unchecked(b) - psi_c - s_hc / s0,
        first_gamma: s_first / (s0 * o.d0),
        second_gamma: b * s_second / (s0 * o.d0),
        log_gamma: digamma_unchecked(n) - o.d0.ln() + s_hn / s0,
        mean_first: s_mean / s0,
        mean_second: b * s_mean2 / s0,
        ln_f: s0.ln() + log_scale,
    })
}

/// The same quantities by adaptive quadrature over the logit of ρ.
fn quadrature_frame(o: &Oriented, spec: &crate::specfun::QuadratureSpec) -> Result<Frame, SpecFunError> {
    let (a, b, n, d0, d1) = (o.a, o.b, o.n, o.d0, o.d1);
    let ln_d = move |t: f64| {
        let (p, q) = split_logit(t);
        (d0 * q + d1 * p).ln()
    };
    let h = |t: f64| a * ln_sigmoid(t) + b * ln_sigmoid(-t) - n * ln_d(t);
    let f_ln_first = |t: f64| ln_sigmoid(t);
    let f_ln_second = |t: f64| ln_sigmoid(-t);
    let f_first = |t: f64| {
        let (p, q) = split_logit(t);
        n * p / (d0 * q + d1 * p)
    };
    let f_second = |t: f64| {
        let (p, q) = split_logit(t);
        n * q / (d0 * q + d1 * p)
    };
    let f_ln_d = |t: f64| ln_d(t);
    let f_mean = |t: f64| split_logit(t).0;
    let f_mean2 = |t: f64| split_logit(t).1;
    let fs: [&dyn Fn(f64) -> f64; 7] = [&f_ln_first, &f_ln_second, &f_first, &f_second, &f_ln_d, &f_mean, &f_mean2];
    let (ln_mass, m) = log_density_moments(h, (a / b).ln(), &fs, spec)?;
    Ok(Frame {
        ln_first: m[0],
        ln_second: m[1],
        first_gamma: m[2],
        second_gamma: m[3],
        log_gamma: digamma_unchecked(n) - m[4],
        mean_first: m[5],
        mean_second: m[6],
        ln_f: ln_mass + n * d0.ln() - crate::specfun::ln_beta_unchecked(a, b),
    })
}

/// Self-normalized importance sampling with Beta(a, b) proposals.
fn monte_carlo_frame(o: &Oriented, spec: &crate::specfun::McSpec, stream: u64) -> Result<Frame, SpecFunError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let z = o.z();
    let mut draws = Vec::with_capacity(spec.sample_size);
    let mut max_lw = f64::NEG_INFINITY;
    for _ in 0..spec.sample_size {
        let (p, q) = beta_variate(o.a, o.b, &mut rng);
        let lw = -o.n * (-z * p).ln_1p();
        max_lw = max_lw.max(lw);
        draws.push((p, q, lw));
    }
    let (mut w_sum, mut acc) = (0.0f64, [0.0f64; 7]);
    for &(p, q, lw) in &draws {
        let w = (lw - max_lw).exp();
        let d = o.d0 * q + o.d1 * p;
        w_sum += w;
        acc[0] += w * p.ln();
        acc[1] += w * q.ln();
        acc[2] += w * o.n * p / d;
        acc[3] += w * o.n * q / d;
        acc[4] += w * d.ln();
        acc[5] += w * p;
        acc[6] += w * q;
    }
    let m: Vec<f64> = acc.iter().map(|v| v / w_sum).collect();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SpecFunError::InvalidIntegrand);
    }
    Ok(Frame {
        ln_first: m[0],
        ln_second: m[1],
        first_gamma: m[2],
        second_gamma: m[3],
        log_gamma: digamma_unchecked(o.n) - m[4],
        mean_first: m[5],
        mean_second: m[6],
        ln_f: (w_sum / spec.sample_size as f64).ln() + max_lw,
    })
}

/// Log-likelihood terms that do not involve the ρ integral.
fn loglik_base(x_ij: u64, x_ji: u64, m: &DyadModel, o: &Oriented) -> f64 {
    let (x1, x2) = (x_ij as f64, x_ji as f64);
    let x = x1 + x2;
    let (a0, b0) = (m.phi * m.pi, m.phi * (1.0 - m.pi));
    let arc = |x: f64, tau: f64| if x > 0.0 { x * tau.ln() } else { 0.0 };
    arc(x1, m.tau_ij) + arc(x2, m.tau_ji) - ln_gamma_unchecked(x1 + 1.0) - ln_gamma_unchecked(x2 + 1.0)
        + m.nu * m.nu.ln()
        + ln_poch_unchecked(m.nu, x)
        - o.n * o.d0.ln()
        + ln_poch_unchecked(a0, x1)
        + ln_poch_unchecked(b0, x2)
        - ln_poch_unchecked(m.phi, x)
}

fn check_model(m: &DyadModel) -> Result<(), SpecFunError> {
    for v in [m.tau_ij, m.tau_ji, m.nu, m.phi] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SpecFunError::Domain { function: "e_step", value: v });
        }
    }
    if !(m.pi > 0.0 && m.pi < 1.0) {
        return Err(SpecFunError::Domain { function: "e_step", value: m.pi });
    }
    Ok(())
}

fn exact_frame(o: &Oriented, opts: &EStepOptions, stream: u64) -> Result<(Frame, bool), SpecFunError> {
    match series_frame(o) {
        Ok(f) => Ok((f, false)),
        Err(SpecFunError::NotConverged { .. }) => {
            let f = match &opts.fallback {
                Integrator::Quadrature(spec) => quadrature_frame(o, spec)?,
                Integrator::MonteCarlo(spec) => monte_carlo_frame(o, spec, stream)?,
            };
            Ok((f, true))
        }
        Err(e) => Err(e),
    }
}

/// Observed log-probability of one dyad's counts.
pub fn dyad_loglik(x_ij: u64, x_ji: u64, m: &DyadModel, opts: &EStepOptions) -> Result<f64, SpecFunError> {
    check_model(m)?;
    let o = Oriented::new(x_ij, x_ji, m);
    let ln_f = match series_frame(&o) {
        Ok(f) => f.ln_f,
        Err(SpecFunError::NotConverged { .. }) => {
            let spec = match &opts.fallback {
                Integrator::Quadrature(spec) => *spec,
                Integrator::MonteCarlo(_) => Default::default(),
            };
            quadrature_frame(&o, &spec)?.ln_f
        }
        Err(e) => return Err(e),
    };
    Ok(loglik_base(x_ij, x_ji, m, &o) + ln_f)
}

/// All five expectations and the log-likelihood for one dyad. `stream`
/// keys the Monte Carlo fallback.
pub fn dyad_expectations(
    x_ij: u64,
    x_ji: u64,
    m: &DyadModel,
    opts: &EStepOptions,
    stream: u64,
) -> Result<DyadExpectations, SpecFunError> {
    check_model(m)?;
    let o = Oriented::new(x_ij, x_ji, m);
    let (frame, fallback) = exact_frame(&o, opts, stream)?;
    let loglik = loglik_base(x_ij, x_ji, m, &o) + frame.ln_f;
    let mut e = if o.mirrored {
        DyadExpectations {
            rho_log_ij: frame.ln_second,
            rho_log_ji: frame.ln_first,
            gamma_arc_ij: frame.second_gamma,
            gamma_arc_ji: frame.first_gamma,
            log_gamma: frame.log_gamma,
            rho_mean_ij: frame.mean_second,
            loglik,
            fallback_used: fallback,
        }
    } else {
        DyadExpectations {
            rho_log_ij: frame.ln_first,
            rho_log_ji: frame.ln_second,
            gamma_arc_ij: frame.first_gamma,
            gamma_arc_ji: frame.second_gamma,
            log_gamma: frame.log_gamma,
            rho_mean_ij: frame.mean_first,
            loglik,
            fallback_used: fallback,
        }
    };
    if opts.form == EStepForm::Factorized {
        let f = factorized(x_ij, x_ji, m, opts, stream)?;
        e = DyadExpectations { loglik, fallback_used: f.fallback_used, ..f };
    }
    Ok(e)
}

/// Expectations under ρ | x ~ Beta(a, b) and γ | ρ, x ~ Gamma(n, D(ρ)).
fn factorized(
    x_ij: u64,
    x_ji: u64,
    m: &DyadModel,
    opts: &EStepOptions,
    stream: u64,
) -> Result<DyadExpectations, SpecFunError> {
    let a = x_ij as f64 + m.phi * m.pi;
    let b = x_ji as f64 + m.phi * (1.0 - m.pi);
    let c = a + b;
    let n = (x_ij + x_ji) as f64 + m.nu;
    let big_b = m.tau_ji + m.nu;
    let z = (m.tau_ji - m.tau_ij) / big_b;
    let mirror_b = m.tau_ij + m.nu;
    let z_mirror = (m.tau_ij - m.tau_ji) / mirror_b;
    let psi_c = digamma_unchecked(c);
    // E[ρ n / D] and E[(1-ρ) n / D] under Beta(a, b); hyp2f1 applies Pfaff for z < 0
    let gamma_arc_ij = n / big_b * (a / c) * hyp2f1(1.0, a + 1.0, c + 1.0, z)?;
    let gamma_arc_ji = n / mirror_b * (b / c) * hyp2f1(1.0, b + 1.0, c + 1.0, z_mirror)?;
    let series = if z.abs() < 1.0 { hyp3f2(1.0, 1.0, a + 1.0, 2.0, c + 1.0, z).ok() } else { None };
    let (log_gamma, fallback_used) = match series {
        Some(f3) => (digamma_unchecked(n) - big_b.ln() + z * (a / c) * f3, false),
        None => {
            let integrator = match opts.fallback {
                Integrator::MonteCarlo(mut mc) => {
                    mc.stream = stream;
                    Integrator::MonteCarlo(mc)
                }
                q => q,
            };
            let e = expect_log_linear(m.tau_ij - m.tau_ji, big_b, BetaLaw::from_shapes(a, b), &integrator)?;
            (digamma_unchecked(n) - e.value, true)
        }
    };
    Ok(DyadExpectations {
        rho_log_ij: digamma_unchecked(a) - psi_c,
        rho_log_ji: digamma_unchecked(b) - psi_c,
        gamma_arc_ij,
        gamma_arc_ji,
        log_gamma,
        rho_mean_ij: a / c,
        loglik: f64::NAN,
        fallback_used,
    })
}

fn non_finite(data: &InteractionData, d: &Dyad, e: &DyadExpectations) -> Option<EmError> {
    let vals = [e.rho_log_ij, e.rho_log_ji, e.gamma_arc_ij, e.gamma_arc_ji, e.log_gamma, e.loglik];
    let ok = vals.iter().all(|v| v.is_finite()) && e.gamma_arc_ij > 0.0 && e.gamma_arc_ji > 0.0;
    (!ok).then(|| EmError::NonFiniteExpectation { dyad: data.dyad_label(d) })
}

/// Runs the E-step over all dyads (in parallel, order preserved).
pub fn e_step(data: &InteractionData, p: &ParamSet, opts: &EStepOptions) -> Result<EStepState, EmError> {
    let per: Vec<DyadExpectations> = data
        .dyads()
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let m = DyadModel::new(p, d.r, d.s);
            let e = dyad_expectations(d.x_ij, d.x_ji, &m, opts, k as u64)
                .map_err(|source| EmError::SpecFun { dyad: data.dyad_label(d), source })?;
            match non_finite(data, d, &e) {
                Some(err) => Err(err),
                None => Ok(e),
            }
        })
        .collect::<Result<_, _>>()?;
    let mut state = EStepState {
        rho_log_ij: Vec::with_capacity(per.len()),
        rho_log_ji: Vec::with_capacity(per.len()),
        gamma_dyad: Vec::with_capacity(per.len()),
        gamma_arc_ij: Vec::with_capacity(per.len()),
        gamma_arc_ji: Vec::with_capacity(per.len()),
        log_gamma_dyad: Vec::with_capacity(per.len()),
        rho_mean_ij: Vec::with_capacity(per.len()),
        fallback_used: Vec::with_capacity(per.len()),
        loglik: 0.0,
    };
    for e in &per {
        state.rho_log_ij.push(e.rho_log_ij);
        state.rho_log_ji.push(e.rho_log_ji);
        state.gamma_dyad.push(e.gamma_dyad());
        state.gamma_arc_ij.push(e.gamma_arc_ij);
        state.gamma_arc_ji.push(e.gamma_arc_ji);
        state.log_gamma_dyad.push(e.log_gamma);
        state.rho_mean_ij.push(e.rho_mean_ij);
        state.fallback_used.push(e.fallback_used);
        state.loglik += e.loglik;
    }
    Ok(state)
}

/// Σ over dyads of ln P(x_ij, x_ji), summed in dyad order.
pub fn observed_loglik(data: &InteractionData, p: &ParamSet, opts: &EStepOptions) -> Result<f64, EmError> {
    let per: Vec<f64> = data
        .dyads()
        .par_iter()
        .map(|d| {
            dyad_loglik(d.x_ij, d.x_ji, &DyadModel::new(p, d.r, d.s), opts)
                .map_err(|source| EmError::SpecFun { dyad: data.dyad_label(d), source })
        })
        .collect::<Result<_, _>>()?;
    Ok(per.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::{McSpec, QuadratureSpec};

    fn model(tau_ij: f64, tau_ji: f64, nu: f64, pi: f64, phi: f64) -> DyadModel {
        DyadModel { tau_ij, tau_ji, nu, pi, phi }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn exact(x1: u64, x2: u64, m: &DyadModel) -> DyadExpectations {
        dyad_expectations(x1, x2, m, &EStepOptions::default(), 0).unwrap()
    }

    #[test]
    fn zero_counts_equal_rates() {
        let m = model(1.7, 1.7, 0.4, 0.3, 6.0);
        let e = exact(0, 0, &m);
        assert!(rel(e.gamma_dyad(), 0.4 / (1.7 + 0.4)) < 1e-14);
        assert!(rel(e.rho_mean_ij, 0.3) < 1e-14);
    }

    #[test]
    fn symmetric_dyad_splits_evenly() {
        let m = model(2.0, 2.0, 0.7, 0.5, 3.0);
        let e = exact(4, 4, &m);
        assert!(rel(e.gamma_arc_ij, e.gamma_dyad() / 2.0) < 1e-14);
        assert!(rel(e.rho_log_ij, e.rho_log_ji) < 1e-14);
    }

    #[test]
    fn relabeling_mirrors_expectations() {
        let m = model(2.2, 0.8, 0.4, 0.3, 6.0);
        let swapped = model(0.8, 2.2, 0.4, 0.7, 6.0);
        let (e, f) = (exact(5, 1, &m), exact(1, 5, &swapped));
        assert!(rel(e.rho_log_ij, f.rho_log_ji) < 1e-13);
        assert!(rel(e.gamma_arc_ij, f.gamma_arc_ji) < 1e-13);
        assert!(rel(e.log_gamma, f.log_gamma) < 1e-13);
        assert!(rel(e.loglik, f.loglik) < 1e-13);
        assert!(rel(e.rho_mean_ij, 1.0 - f.rho_mean_ij) < 1e-13);
    }

    fn frame_close(a: &Frame, b: &Frame, tol: f64) -> bool {
        [
            (a.ln_first, b.ln_first),
            (a.ln_second, b.ln_second),
            (a.first_gamma, b.first_gamma),
            (a.second_gamma, b.second_gamma),
            (a.log_gamma, b.log_gamma),
            (a.ln_f, b.ln_f),
            (a.mean_first, b.mean_first),
            (a.mean_second, b.mean_second),
        ]
        .iter()
        .all(|&(x, y)| (x - y).abs() <= tol * y.abs().max(1e-3))
    }

    #[test]
    fn series_matches_quadrature_path() {
        let spec = QuadratureSpec::default();
        for &(x1, x2) in &[(0u64, 0u64), (1, 0), (5, 1), (0, 40), (40, 40)] {
            for &nu in &[0.05, 0.5, 5.0] {
                for &pi in &[0.1, 0.27, 0.5] {
                    for &phi in &[1.0, 12.62, 1000.0] {
                        for &(t1, t2) in &[(2.2, 0.8), (0.3, 4.0), (1.0, 1.0)] {
                            let o = Oriented::new(x1, x2, &model(t1, t2, nu, pi, phi));
                            let s = series_frame(&o).unwrap();
                            let q = quadrature_frame(&o, &spec).unwrap();
                            assert!(frame_close(&s, &q, 1e-9), "{x1} {x2} {nu} {pi} {phi} {t1} {t2}\n{s:?}\n{q:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn monte_carlo_fallback_is_close_and_deterministic() {
        let o = Oriented::new(5, 1, &model(2.2, 0.8, 0.4, 0.3, 6.0));
        let spec = McSpec { sample_size: 200_000, seed: 11, stream: 0 };
        let a = monte_carlo_frame(&o, &spec, 3).unwrap();
        let b = monte_carlo_frame(&o, &spec, 3).unwrap();
        assert!(frame_close(&a, &b, 0.0));
        let s = series_frame(&o).unwrap();
        assert!(frame_close(&a, &s, 2e-2), "{a:?}\n{s:?}");
    }

    #[test]
    fn identities_and_jensen() {
        for &(x1, x2, t1, t2) in &[(5u64, 1u64, 2.2, 0.8), (0, 3, 0.1, 6.0), (40, 0, 9.0, 0.2)] {
            let e = exact(x1, x2, &model(t1, t2, 0.4, 0.3, 6.0));
            assert_eq!(e.gamma_arc_ij + e.gamma_arc_ji, e.gamma_dyad());
            assert!(e.rho_log_ij < 0.0 && e.rho_log_ji < 0.0);
            assert!(e.log_gamma < e.gamma_dyad().ln());
        }
    }

    #[test]
    fn forms_agree_when_rates_are_symmetric() {
        let m = model(1.3, 1.3, 0.6, 0.27, 12.62);
        let fact = EStepOptions { form: EStepForm::Factorized, ..Default::default() };
        let e = exact(3, 7, &m);
        let f = dyad_expectations(3, 7, &m, &fact, 0).unwrap();
        for (x, y) in [
            (e.rho_log_ij, f.rho_log_ij),
            (e.rho_log_ji, f.rho_log_ji),
            (e.gamma_arc_ij, f.gamma_arc_ij),
            (e.gamma_arc_ji, f.gamma_arc_ji),
            (e.log_gamma, f.log_gamma),
            (e.rho_mean_ij, f.rho_mean_ij),
        ] {
            assert!(rel(x, y) < 1e-12, "{x} {y}");
        }
    }

    #[test]
    fn forms_differ_when_rates_are_not() {
        let m = model(4.0, 0.5, 0.3, 0.4, 5.0);
        let fact = EStepOptions { form: EStepForm::Factorized, ..Default::default() };
        let e = exact(2, 2, &m);
        let f = dyad_expectations(2, 2, &m, &fact, 0).unwrap();
        assert!(rel(e.gamma_arc_ij, f.gamma_arc_ij) > 1e-3);
        assert_eq!(e.loglik, f.loglik);
    }

    #[test]
    fn factorized_log_gamma_fallback_matches_series() {
        // |z| >= 1 forces the integral; compare with z slightly inside the disc
        let fact = EStepOptions { form: EStepForm::Factorized, ..Default::default() };
        let inside = dyad_expectations(2, 3, &model(0.2, 3.0, 0.5, 0.3, 4.0), &fact, 0).unwrap();
        assert!(!inside.fallback_used);
        let outside = dyad_expectations(2, 3, &model(9.0, 0.5, 0.5, 0.3, 4.0), &fact, 0).unwrap();
        assert!(outside.fallback_used);
        // direct quadrature of ψ(n) − E[ln D] under Beta(a, b)
        let (a, b, n) = (2.0 + 1.2, 3.0 + 2.8, 5.5);
        let e_ln_d =
            crate::specfun::beta_expectation(a, b, |p, q| (9.5 * p + 1.0 * q).ln(), &QuadratureSpec::default())
                .unwrap();
        assert!(rel(outside.log_gamma, digamma_unchecked(n) - e_ln_d) < 1e-10);
    }

    #[test]
    fn rejects_invalid_model() {
        assert!(dyad_expectations(1, 1, &model(0.0, 1.0, 1.0, 0.5, 1.0), &EStepOptions::default(), 0).is_err());
        assert!(dyad_loglik(1, 1, &model(1.0, 1.0, 1.0, 1.0, 1.0), &EStepOptions::default()).is_err());
    }

    #[test]
    fn dyad_likelihood_sums_to_one() {
        let m = model(1.1, 0.6, 3.0, 0.3, 6.0);
        let opts = EStepOptions::default();
        let mut total = 0.0;
        for x1 in 0..60 {
            for x2 in 0..60 {
                total += dyad_loglik(x1, x2, &m, &opts).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }
}
