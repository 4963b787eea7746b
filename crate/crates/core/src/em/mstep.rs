//! M-step: quasi-symmetry GLM for the rates, Nelder–Mead for (π, φ) and ν.

use std::collections::BTreeMap;

use crate::data::{DyadBlock, InteractionData};
use crate::glm::{build_design, extract_rates, irls_fit_from, rate_coefficients, IrlsOptions};
use crate::optim::{nelder_mead_max, SimplexOptions};
use crate::params::{at_log_cap, expit, logit, ParamSet, LOG_CAP};
use crate::specfun::{digamma_unchecked, ln_beta_unchecked, ln_gamma_unchecked, trigamma_unchecked};

use super::estep::EStepState;
use super::EmError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepOptions {
    pub irls: IrlsOptions,
    pub simplex: SimplexOptions,
}

impl Default for MStepOptions {
    fn default() -> Self {
        Self {
            irls: IrlsOptions::default(),
            simplex: SimplexOptions { initial_step: 0.1, ..SimplexOptions::default() },
        }
    }
}

/// Per dyad-block sufficient statistics of the E-step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockSums {
    pub dyads: usize,
    /// Σ ϱ_ij
    pub rho_log_ij: f64,
    /// Σ ϱ_ji
    pub rho_log_ji: f64,
    /// Σ (γ̂_{i∧j} − ς_ij)
    pub gamma_minus_log: f64,
}

/// Sums in dyad order, so the result does not depend on threading.
pub fn block_sums(data: &InteractionData, state: &EStepState) -> BTreeMap<DyadBlock, BlockSums> {
    let mut sums: BTreeMap<DyadBlock, BlockSums> = BTreeMap::new();
    for (k, d) in data.dyads().iter().enumerate() {
        let e = sums.entry(d.dyad_block()).or_default();
        e.dyads += 1;
        e.rho_log_ij += state.rho_log_ij[k];
        e.rho_log_ji += state.rho_log_ji[k];
        e.gamma_minus_log += state.gamma_dyad[k] - state.log_gamma_dyad[k];
    }
    sums
}

/// f(π, φ) = −b ln B(φπ, φ(1−π)) + φ Σ(π ϱ_ij + (1−π) ϱ_ji).
pub fn share_objective(sums: &BlockSums, pi: f64, phi: f64) -> f64 {
    let b = sums.dyads as f64;
    -b * ln_beta_unchecked(phi * pi, phi * (1.0 - pi)) + phi * (pi * sums.rho_log_ij + (1.0 - pi) * sums.rho_log_ji)
}

/// g(ν) = b(ν ln ν − ln Γ(ν)) − ν Σ(γ̂ − ς).
pub fn shape_objective(sums: &BlockSums, nu: f64) -> f64 {
    let b = sums.dyads as f64;
    b * (nu * nu.ln() - ln_gamma_unchecked(nu)) - nu * sums.gamma_minus_log
}

fn clamp_cap(v: f64) -> f64 {
    v.clamp(-LOG_CAP, LOG_CAP)
}

fn at_cap(v: f64) -> bool {
    at_log_cap(v)
}

/// Which unconstrained coordinates ended on the ±30 cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockCaps {
    pub pi: bool,
    pub phi: bool,
    pub nu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutput {
    pub params: ParamSet,
    pub rate_coefficients: Vec<f64>,
    pub caps: BTreeMap<DyadBlock, BlockCaps>,
    pub glm_converged: bool,
    pub ill_conditioned: bool,
    /// Dyad blocks where a simplex search ran out of evaluations.
    pub simplex_budget_hit: Vec<DyadBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShareMax {
    pub pi: f64,
    pub phi: f64,
    pub pi_capped: bool,
    pub phi_capped: bool,
    pub simplex_converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeMax {
    pub nu: f64,
    pub capped: bool,
    pub simplex_converged: bool,
}

const POLISH_MAX_ITER: usize = 100;
const POLISH_MAX_HALVINGS: usize = 60;

/// Newton ascent over `t` (dimension 1 or 2) for a concave objective.
/// Steps are halved until `feasible` holds and either the objective does not
/// decrease or the slope along the step is still non-negative at its end.
fn newton_ascent(
    t0: &[f64],
    f: impl Fn(&[f64]) -> f64,
    grad_hess: impl Fn(&[f64]) -> (Vec<f64>, Vec<Vec<f64>>),
    feasible: impl Fn(&[f64]) -> bool,
) -> Vec<f64> {
    let mut t = t0.to_vec();
    let mut ft = f(&t);
    if !ft.is_finite() {
        return t;
    }
    for _ in 0..POLISH_MAX_ITER {
        let (g, h) = grad_hess(&t);
        let step = match t.len() {
            1 => vec![-g[0] / h[0][0]],
            _ => {
                let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
                vec![-(h[1][1] * g[0] - h[0][1] * g[1]) / det, -(h[0][0] * g[1] - h[1][0] * g[0]) / det]
            }
        };
        // a non-concave reading (roundoff at extreme shapes) ends the polish
        let ascent: f64 = step.iter().zip(&g).map(|(s, g)| s * g).sum();
        if !step.iter().all(|s| s.is_finite()) || !(ascent >= 0.0) {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..POLISH_MAX_HALVINGS {
            let cand: Vec<f64> = t.iter().zip(&step).map(|(x, s)| x + scale * s).collect();
            if feasible(&cand) {
                let fc = f(&cand);
                // by concavity a non-negative slope at the end point means the
                // objective rose along the whole step, even below roundoff
                let slope: f64 = grad_hess(&cand).0.iter().zip(&step).map(|(g, s)| g * s).sum();
                if fc >= ft || slope >= 0.0 {
                    accepted = Some((cand, fc.max(ft)));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let moved = cand.iter().zip(&t).map(|(a, b)| (a - b).abs() / b.abs().max(1e-300)).fold(0.0, f64::max);
        t = cand;
        ft = fc;
        if moved < 1e-15 {
            break;
        }
    }
    t
}

/// Maximizes f over (π, φ) for one dyad-block (π = 0.5 on the diagonal).
///
/// Nelder–Mead on (logit π, ln φ) from `start`, then Newton polish in the
/// Beta shapes (a, b) = (φπ, φ(1−π)) where f is concave. Coordinates that
/// reach the ±30 cap are held there.
pub fn maximize_share(
    sums: &BlockSums,
    diagonal: bool,
    start: (f64, f64),
    opts: &SimplexOptions,
) -> Result<ShareMax, EmError> {
    let (pi, phi, conv) = if diagonal {
        let f = |v: &[f64]| share_objective(sums, 0.5, clamp_cap(v[0]).exp());
        let res = nelder_mead_max(f, &[start.1.ln()], opts)?;
        (0.5, clamp_cap(res.argmax[0]).exp(), res.converged)
    } else {
        let f = |v: &[f64]| share_objective(sums, expit(clamp_cap(v[0])), clamp_cap(v[1]).exp());
        let res = nelder_mead_max(f, &[logit(start.0), start.1.ln()], opts)?;
        (expit(clamp_cap(res.argmax[0])), clamp_cap(res.argmax[1]).exp(), res.converged)
    };
    let pi_fixed = diagonal || at_cap(logit(pi));
    let phi_fixed = at_cap(phi.ln());
    // (a, b) = base + Σ t_k d_k
    let (base, dirs, t0): ([f64; 2], Vec<[f64; 2]>, Vec<f64>) = match (pi_fixed, phi_fixed) {
        (true, true) => {
            return Ok(ShareMax { pi, phi, pi_capped: !diagonal, phi_capped: true, simplex_converged: conv })
        }
        (true, false) => ([0.0, 0.0], vec![[pi, 1.0 - pi]], vec![phi]),
        (false, true) => ([0.0, phi], vec![[phi, -phi]], vec![pi]),
        (false, false) => ([0.0, 0.0], vec![[1.0, 0.0], [0.0, 1.0]], vec![phi * pi, phi * (1.0 - pi)]),
    };
    let shapes = |t: &[f64]| {
        let mut ab = base;
        for (d, tk) in dirs.iter().zip(t) {
            ab[0] += tk * d[0];
            ab[1] += tk * d[1];
        }
        ab
    };
    let n = sums.dyads as f64;
    let objective = |t: &[f64]| {
        let [a, b] = shapes(t);
        -n * ln_beta_unchecked(a, b) + a * sums.rho_log_ij + b * sums.rho_log_ji
    };
    let grad_hess = |t: &[f64]| {
        let [a, b] = shapes(t);
        let (pa, pb, pab) = (digamma_unchecked(a), digamma_unchecked(b), digamma_unchecked(a + b));
        let (qa, qb, qab) = (trigamma_unchecked(a), trigamma_unchecked(b), trigamma_unchecked(a + b));
        let g = [-n * (pa - pab) + sums.rho_log_ij, -n * (pb - pab) + sums.rho_log_ji];
        let h = [[-n * (qa - qab), n * qab], [n * qab, -n * (qb - qab)]];
        let gt: Vec<f64> = dirs.iter().map(|d| d[0] * g[0] + d[1] * g[1]).collect();
        let ht: Vec<Vec<f64>> = dirs
            .iter()
            .map(|di| {
                dirs.iter()
                    .map(|dj| di[0] * (h[0][0] * dj[0] + h[0][1] * dj[1]) + di[1] * (h[1][0] * dj[0] + h[1][1] * dj[1]))
                    .collect()
            })
            .collect();
        (gt, ht)
    };
    let feasible = |t: &[f64]| {
        let [a, b] = shapes(t);
        a > 0.0 && b > 0.0 && !at_cap((a + b).ln()) && (diagonal || !at_cap((a / b).ln()))
    };
    let t = newton_ascent(&t0, objective, grad_hess, feasible);
    let [a, b] = shapes(&t);
    let (pi, phi) = if diagonal {
        (0.5, a + b)
    } else if phi_fixed {
        (a / phi, phi)
    } else {
        (a / (a + b), a + b)
    };
    Ok(ShareMax {
        pi,
        phi,
        pi_capped: !diagonal && at_cap(logit(pi)),
        phi_capped: at_cap(phi.ln()),
        simplex_converged: conv,
    })
}

/// Maximizes g over ν for one dyad-block: Nelder–Mead on ln ν from
/// `start`, then Newton polish on ν where g is concave.
pub fn maximize_shape(sums: &BlockSums, start: f64, opts: &SimplexOptions) -> Result<ShapeMax, EmError> {
    let g = |v: &[f64]| shape_objective(sums, clamp_cap(v[0]).exp());
    let res = nelder_mead_max(g, &[start.ln()], opts)?;
    let nu = clamp_cap(res.argmax[0]).exp();
    if at_cap(nu.ln()) {
        return Ok(ShapeMax { nu, capped: true, simplex_converged: res.converged });
    }
    let n = sums.dyads as f64;
    let t = newton_ascent(
        &[nu],
        |t| shape_objective(sums, t[0]),
        |t| {
            let v = t[0];
            let g = n * (v.ln() + 1.0 - digamma_unchecked(v)) - sums.gamma_minus_log;
            let h = n * (1.0 / v - trigamma_unchecked(v));
            (vec![g], vec![vec![h]])
        },
        |t| t[0] > 0.0 && !at_cap(t[0].ln()),
    );
    Ok(ShapeMax { nu: t[0], capped: false, simplex_converged: res.converged })
}

/// Interleaved offsets ln γ̂_ij, ln γ̂_ji.
pub fn rate_offsets(state: &EStepState) -> Vec<f64> {
    state.gamma_arc_ij.iter().zip(&state.gamma_arc_ji).flat_map(|(a, b)| [a.ln(), b.ln()]).collect()
}

/// One M-step from `prev`. Every sub-problem starts at `prev`, so none of
/// them can lower the expected complete log-likelihood.
pub fn m_step(
    data: &InteractionData,
    state: &EStepState,
    prev: &ParamSet,
    opts: &MStepOptions,
) -> Result<MStepOutput, EmError> {
    let s = data.num_blocks();
    let design = build_design(data, &rate_offsets(state))?;
    let warm = rate_coefficients(prev);
    let glm = irls_fit_from(&design, Some(&warm), opts.irls)?;
    let mut p = prev.clone();
    extract_rates(&glm.coefficients, s)?.apply(&mut p)?;

    let mut caps = BTreeMap::new();
    let mut budget_hit = Vec::new();
    for (block, sums) in block_sums(data, state) {
        let (r, c) = (block.low(), block.high());
        let share = maximize_share(&sums, r == c, (prev.pi(r, c), prev.phi(r, c)), &opts.simplex)?;
        if r != c {
            p.set_pi(r, c, share.pi)?;
        }
        p.set_phi(r, c, share.phi)?;
        let shape = maximize_shape(&sums, prev.nu(r, c), &opts.simplex)?;
        p.set_nu(r, c, shape.nu)?;
        if !(share.simplex_converged && shape.simplex_converged) {
            budget_hit.push(block);
        }
        caps.insert(block, BlockCaps { pi: share.pi_capped, phi: share.phi_capped, nu: shape.capped });
    }
    Ok(MStepOutput {
        params: p,
        rate_coefficients: glm.coefficients,
        caps,
        glm_converged: glm.converged,
        ill_conditioned: glm.ill_conditioned,
        simplex_budget_hit: budget_hit,
    })
}

/// Gradients of the three M-step objectives at `p`, for a given E-step state.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepScores {
    /// GLM score per design column.
    pub glm: Vec<f64>,
    /// ∂f/∂(logit π) (r < s only) and ∂f/∂(ln φ), central differences.
    pub share: BTreeMap<DyadBlock, Vec<f64>>,
    /// ∂g/∂(ln ν), central differences.
    pub shape: BTreeMap<DyadBlock, f64>,
}

impl MStepScores {
    /// Largest absolute score, skipping coordinates that sit on a cap.
    pub fn max_abs(&self, p: &ParamSet) -> f64 {
        let mut m = self.glm.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (block, g) in &self.share {
            let (r, c) = (block.low(), block.high());
            let capped_pi = r != c && at_cap(logit(p.pi(r, c)));
            let capped_phi = at_cap(p.phi(r, c).ln());
            for (k, v) in g.iter().enumerate() {
                let is_pi = r != c && k == 0;
                if (is_pi && capped_pi) || (!is_pi && capped_phi) {
                    continue;
                }
                m = m.max(v.abs());
            }
        }
        for (block, g) in &self.shape {
            if !at_cap(p.nu(block.low(), block.high()).ln()) {
                m = m.max(g.abs());
            }
        }
        m
    }
}

pub fn m_step_scores(data: &InteractionData, state: &EStepState, p: &ParamSet) -> Result<MStepScores, EmError> {
    let design = build_design(data, &rate_offsets(state))?;
    let glm = design.score(&rate_coefficients(p));
    let h = 1e-5;
    let diff = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let mut share = BTreeMap::new();
    let mut shape = BTreeMap::new();
    for (block, sums) in block_sums(data, state) {
        let (r, c) = (block.low(), block.high());
        let (pi, phi) = (p.pi(r, c), p.phi(r, c));
        let mut g = Vec::new();
        if r != c {
            g.push(diff(&|u| share_objective(&sums, expit(u), phi), logit(pi)));
        }
        g.push(diff(&|v| share_objective(&sums, pi, v.exp()), phi.ln()));
        share.insert(block, g);
        shape.insert(block, diff(&|v| shape_objective(&sums, v.exp()), p.nu(r, c).ln()));
    }
    Ok(MStepScores { glm, share, shape })
}
