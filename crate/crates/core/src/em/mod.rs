//! EM fitting: starting values, E-step, M-step and convergence monitoring.

mod estep;
mod init;
mod mstep;

pub use estep::{
    dyad_expectations, dyad_loglik, e_step, observed_loglik, DyadExpectations, DyadModel, EStepForm, EStepOptions,
    EStepState,
};
pub use init::{init_params, init_params_with_diagnostics};
pub use mstep::{
    block_sums, m_step, m_step_scores, maximize_shape, maximize_share, rate_offsets, shape_objective, share_objective,
    BlockCaps, BlockSums, MStepOptions, MStepOutput, MStepScores, ShapeMax, ShareMax,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DyadBlock, InteractionData};
use crate::glm::GlmError;
use crate::optim::OptimError;
use crate::params::{ParamError, ParamSet};
use crate::specfun::SpecFunError;

#[derive(Debug, Error)]
pub enum EmError {
    #[error("dyad block {0} has no dyads")]
    EmptyDyadBlock(String),
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("dyad {dyad}: {source}")]
    SpecFun { dyad: String, source: SpecFunError },
    #[error("dyad {dyad}: non-finite posterior expectation")]
    NonFiniteExpectation { dyad: String },
    #[error("log-likelihood decreased by {drop:e} at iteration {iteration}")]
    NonMonotone { iteration: usize, drop: f64, trace: Vec<f64> },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

impl EmError {
    /// Failures that indicate a broken invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, EmError::NonMonotone { .. } | EmError::NonFiniteExpectation { .. })
    }
}

/// `F^M` style name of a dyad block.
pub fn block_name(b: DyadBlock, labels: &[String]) -> String {
    let l = |k: usize| labels.get(k).cloned().unwrap_or_else(|| (k + 1).to_string());
    format!("{}^{}", l(b.low()), l(b.high()))
}

#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// A log ν, log φ or logit π coordinate ended on the ±30 cap.
    CapActive {
        parameter: String,
        value: f64,
    },
    InitCapped {
        parameter: String,
        reason: String,
    },
    SmallBlock {
        block: String,
        dyads: usize,
    },
    IllConditioned {
        iteration: usize,
    },
    GlmNotConverged {
        iteration: usize,
    },
    SimplexBudget {
        iteration: usize,
        block: String,
    },
}

/// How successive EM steps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acceleration {
    /// Plain EM: one E-step and one M-step per iteration.
    None,
    /// Squared extrapolation (SQUAREM, SqS3 step length) over two EM steps,
    /// followed by a stabilizing EM step. Extrapolations that lower the
    /// log-likelihood are discarded.
    #[default]
    Squarem,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub epsilon: f64,
    /// Relative change of the observed log-likelihood.
    pub tol: f64,
    /// Largest change of an unconstrained coordinate, relative to max(1, |v|).
    pub param_tol: f64,
    /// Budget of M-steps.
    pub max_iter: usize,
    /// Allowed decrease of the log-likelihood across an EM step before the
    /// fit aborts.
    pub monotone_slack: f64,
    pub acceleration: Acceleration,
    pub estep: EStepOptions,
    pub mstep: MStepOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            tol: 1e-8,
            param_tol: 1e-6,
            max_iter: 2000,
            monotone_slack: 1e-8,
            acceleration: Acceleration::default(),
            estep: EStepOptions::default(),
            mstep: MStepOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ParamSet,
    /// Log-likelihood after every accepted update, starting value first.
    pub loglik_trace: Vec<f64>,
    /// M-steps taken.
    pub iterations: usize,
    pub converged: bool,
    pub estep_fallback_count: usize,
    pub diagnostics: Vec<Diagnostic>,
    /// E-step at `params`.
    pub estep: EStepState,
    /// The E-step whose M-step produced `params`; `None` when no M-step ran.
    pub producing_estep: Option<EStepState>,
}

pub const FIT_VERSION: &str = "lassb-fit/1";

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace has the starting value")
    }

    /// JSON form: params plus trace and diagnostics.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "version": FIT_VERSION,
            "params": self.params.to_json(),
            "loglik": self.loglik(),
            "iterations": self.iterations,
            "converged": self.converged,
            "estep_fallback_count": self.estep_fallback_count,
            "diagnostics": self.diagnostics,
            "loglik_trace": self.loglik_trace,
        })
    }
}

fn max_relative_change(a: &ParamSet, b: &ParamSet) -> f64 {
    a.to_unconstrained()
        .iter()
        .zip(b.to_unconstrained())
        .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn cap_diagnostics(p: &ParamSet, labels: &[String]) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let s = p.num_blocks();
    for b in DyadBlock::all(s) {
        let (r, c) = (b.low(), b.high());
        let name = block_name(b, labels);
        for (kind, value) in [("nu", p.nu(r, c)), ("phi", p.phi(r, c))] {
            if crate::params::at_log_cap(value.ln()) {
                out.push(Diagnostic::CapActive { parameter: format!("{kind}_{name}"), value });
            }
        }
        if r != c && crate::params::at_log_cap(crate::params::logit(p.pi(r, c))) {
            out.push(Diagnostic::CapActive { parameter: format!("pi_{name}"), value: p.pi(r, c) });
        }
    }
    out
}

/// Fits from method-of-moments starting values.
pub fn fit(data: &InteractionData, config: &FitConfig) -> Result<FitResult, EmError> {
    let (start, diags) = init_params_with_diagnostics(data, config.epsilon)?;
    fit_from(data, start, diags, config)
}

struct Run<'a> {
    data: &'a InteractionData,
    config: &'a FitConfig,
    labels: Vec<String>,
    trace: Vec<f64>,
    diagnostics: Vec<Diagnostic>,
    events: BTreeSet<String>,
    fallbacks: usize,
    steps: usize,
}

impl Run<'_> {
    fn estep(&mut self, p: &ParamSet) -> Result<EStepState, EmError> {
        let state = e_step(self.data, p, &self.config.estep)?;
        self.fallbacks += state.fallback_count();
        Ok(state)
    }

    /// One M-step from `(p, state)` and the E-step at its result.
    fn update(&mut self, p: &ParamSet, state: &EStepState) -> Result<(ParamSet, EStepState), EmError> {
        self.steps += 1;
        let it = self.steps;
        let out = m_step(self.data, state, p, &self.config.mstep)?;
        if out.ill_conditioned && self.events.insert("ill".into()) {
            self.diagnostics.push(Diagnostic::IllConditioned { iteration: it });
        }
        if !out.glm_converged && self.events.insert("glm".into()) {
            self.diagnostics.push(Diagnostic::GlmNotConverged { iteration: it });
        }
        for b in &out.simplex_budget_hit {
            let name = block_name(*b, &self.labels);
            if self.events.insert(format!("simplex {name}")) {
                self.diagnostics.push(Diagnostic::SimplexBudget { iteration: it, block: name });
            }
        }
        let next = self.estep(&out.params)?;
        Ok((out.params, next))
    }

    /// An EM step from the current point; aborts if the likelihood drops.
    fn em_step(&mut self, p: &ParamSet, state: &EStepState) -> Result<(ParamSet, EStepState), EmError> {
        let (q, next) = self.update(p, state)?;
        if next.loglik < state.loglik - self.config.monotone_slack {
            let mut trace = std::mem::take(&mut self.trace);
            trace.push(next.loglik);
            return Err(EmError::NonMonotone { iteration: self.steps, drop: state.loglik - next.loglik, trace });
        }
        Ok((q, next))
    }

    fn small_change(&self, p: &ParamSet, ll: f64, q: &ParamSet, ll_next: f64) -> bool {
        let rel_ll = (ll_next - ll).abs() / ll_next.abs().max(1.0);
        rel_ll < self.config.tol && max_relative_change(p, q) < self.config.param_tol
    }

    /// SqS3 extrapolation from three EM iterates, then one EM step from the
    /// extrapolated point. `None` when the point is unusable.
    fn extrapolate(
        &mut self,
        iterates: [&ParamSet; 3],
        step_max: f64,
    ) -> Option<(f64, ParamSet, EStepState, EStepState)> {
        let u: Vec<Vec<f64>> = iterates.iter().map(|p| p.to_unconstrained()).collect();
        let r: Vec<f64> = u[1].iter().zip(&u[0]).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = (0..r.len()).map(|k| u[2][k] - 2.0 * u[1][k] + u[0][k]).collect();
        let sr2: f64 = r.iter().map(|x| x * x).sum();
        let sv2: f64 = v.iter().map(|x| x * x).sum();
        if !(sv2 > 0.0) {
            return None;
        }
        // α = 1 lands on the second iterate; accepting it is what lets
        // step_max grow
        let alpha = (sr2 / sv2).sqrt().clamp(1.0, step_max);
        let s = iterates[0].num_blocks();
        let rates = crate::glm::Columns::new(s).len();
        let ext: Vec<f64> = (0..r.len())
            .map(|k| {
                let x = u[0][k] + 2.0 * alpha * r[k] + alpha * alpha * v[k];
                if k >= rates {
                    x.clamp(-crate::params::LOG_CAP, crate::params::LOG_CAP)
                } else {
                    x
                }
            })
            .collect();
        let p = ParamSet::from_unconstrained(s, &ext).ok()?;
        let state = self.estep(&p).ok()?;
        let (q, next) = self.update(&p, &state).ok()?;
        Some((alpha, q, state, next))
    }
}

/// EM from `start`. Stops when an EM step changes the log-likelihood by
/// less than `tol` (relative) and no unconstrained coordinate by more than
/// `param_tol`.
pub fn fit_from(
    data: &InteractionData,
    start: ParamSet,
    diagnostics: Vec<Diagnostic>,
    config: &FitConfig,
) -> Result<FitResult, EmError> {
    if !(config.tol > 0.0 && config.param_tol > 0.0) {
        return Err(EmError::InvalidConfig("tolerances must be positive".into()));
    }
    let mut run = Run {
        data,
        config,
        labels: data.partition().block_labels().to_vec(),
        trace: Vec::new(),
        diagnostics,
        events: BTreeSet::new(),
        fallbacks: 0,
        steps: 0,
    };
    let mut params = start;
    let mut state = run.estep(&params)?;
    run.trace.push(state.loglik);
    let mut producing: Option<EStepState> = None;
    let mut converged = false;
    let mut step_max = 1.0f64;
    while run.steps < config.max_iter {
        let (p1, s1) = run.em_step(&params, &state)?;
        let done = run.small_change(&params, state.loglik, &p1, s1.loglik);
        if done || config.acceleration == Acceleration::None || run.steps >= config.max_iter {
            run.trace.push(s1.loglik);
            params = p1;
            producing = Some(std::mem::replace(&mut state, s1));
            converged = done;
            if done {
                break;
            }
            continue;
        }
        let (p2, s2) = run.em_step(&p1, &s1)?;
        let done = run.small_change(&p1, s1.loglik, &p2, s2.loglik);
        let ext =
            if done || run.steps >= config.max_iter { None } else { run.extrapolate([&params, &p1, &p2], step_max) };
        match ext {
            // SQUAREM keeps an extrapolation that does not fall below the
            // cycle's starting point
            Some((alpha, q, from, next)) if next.loglik >= state.loglik => {
                run.trace.push(next.loglik);
                params = q;
                producing = Some(from);
                state = next;
                if alpha >= step_max {
                    step_max *= 4.0;
                }
            }
            other => {
                if other.is_some() {
                    step_max = (step_max / 4.0).max(1.0);
                }
                run.trace.push(s2.loglik);
                params = p2;
                producing = Some(s1);
                state = s2;
                if done {
                    converged = true;
                    break;
                }
            }
        }
    }
    run.diagnostics.extend(cap_diagnostics(&params, &run.labels));
    Ok(FitResult {
        params,
        loglik_trace: run.trace,
        iterations: run.steps,
        converged,
        estep_fallback_count: run.fallbacks,
        diagnostics: run.diagnostics,
        estep: state,
        producing_estep: producing,
    })
}
