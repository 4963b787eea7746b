//! Recovered per-dyad quantities and block-level association measures.

use serde::Serialize;

use crate::data::{DyadBlock, InteractionData};
use crate::em::EStepState;
use crate::params::ParamSet;

use super::InferenceError;

/// Marginal means m_rs and the measures built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationTable {
    labels: Vec<String>,
    params: ParamSet,
}

/// A named positive function of Φ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measure {
    pub name: String,
    pub value: f64,
}

fn label(labels: &[String], k: usize) -> String {
    labels.get(k).cloned().unwrap_or_else(|| (k + 1).to_string())
}

/// Var(λ*_ij) for an arc of `B_rs`, from ν_{r∧s}, π_rs and φ_{r∧s}.
pub fn var_lambda_star(nu: f64, pi: f64, phi: f64) -> f64 {
    let d = pi * (phi + 1.0);
    (pi * phi + 1.0) / d / nu + (1.0 - pi) / d
}

impl AssociationTable {
    pub fn num_blocks(&self) -> usize {
        self.params.num_blocks()
    }

    /// m_rs = θ α_r β_s μ_{r∧s} π_rs.
    pub fn m(&self, r: usize, s: usize) -> f64 {
        self.params.mean_interaction(r, s)
    }

    /// m_rs / m_sr.
    pub fn interaction_ratio(&self, r: usize, s: usize) -> f64 {
        self.m(r, s) / self.m(s, r)
    }

    /// (α_r / α_s)(β_s / β_r): the interaction ratio divided by the odds π_rs / π_sr.
    pub fn discounted_ratio(&self, r: usize, s: usize) -> f64 {
        let p = &self.params;
        p.alpha(r) / p.alpha(s) * (p.beta(s) / p.beta(r))
    }

    /// (m_rs / m_rs') / (m_r's / m_r's').
    pub fn block_odds_ratio(&self, r: usize, r2: usize, s: usize, s2: usize) -> f64 {
        (self.m(r, s) / self.m(r, s2)) / (self.m(r2, s) / self.m(r2, s2))
    }

    pub fn var_lambda_star(&self, r: usize, s: usize) -> f64 {
        let p = &self.params;
        var_lambda_star(p.nu(r, s), p.pi(r, s), p.phi(r, s))
    }

    /// Every reported measure, in a fixed order: m_rs; interaction and
    /// discounted ratios for r ≠ s; block-odds ratios
    /// (m_r's/m_r's')/(m_rs/m_rs') for r < r', s < s'; ratios of ν and of φ
    /// between dyad blocks; Var(λ*) per arc block.
    pub fn measures(&self) -> Vec<Measure> {
        let s = self.num_blocks();
        let l = |k| label(&self.labels, k);
        let mut out = Vec::new();
        let mut push = |name: String, value: f64| out.push(Measure { name, value });
        for r in 0..s {
            for c in 0..s {
                push(format!("m_{}{}", l(r), l(c)), self.m(r, c));
            }
        }
        for r in 0..s {
            for c in 0..s {
                if r != c {
                    push(format!("interaction_ratio_{}{}", l(r), l(c)), self.interaction_ratio(r, c));
                }
            }
        }
        for r in 0..s {
            for c in 0..s {
                if r != c {
                    push(format!("discounted_ratio_{}{}", l(r), l(c)), self.discounted_ratio(r, c));
                }
            }
        }
        for r in 0..s {
            for r2 in r + 1..s {
                for c in 0..s {
                    for c2 in c + 1..s {
                        push(
                            format!("block_odds_ratio_{0}{2}/{0}{3}:{1}{2}/{1}{3}", l(r2), l(r), l(c), l(c2)),
                            self.block_odds_ratio(r2, r, c, c2),
                        );
                    }
                }
            }
        }
        let blocks: Vec<DyadBlock> = DyadBlock::all(s).collect();
        let p = &self.params;
        for (kind, get) in [("nu", ParamSet::nu as fn(&ParamSet, usize, usize) -> f64), ("phi", ParamSet::phi)] {
            for (i, a) in blocks.iter().enumerate() {
                for b in &blocks[i + 1..] {
                    push(
                        format!("{kind}_{}^{}/{kind}_{}^{}", l(a.low()), l(a.high()), l(b.low()), l(b.high())),
                        get(p, a.low(), a.high()) / get(p, b.low(), b.high()),
                    );
                }
            }
        }
        for r in 0..s {
            for c in 0..s {
                push(format!("var_lambda_star_{}{}", l(r), l(c)), self.var_lambda_star(r, c));
            }
        }
        out
    }
}

/// Association measures of `p`; block names come from `labels`.
pub fn association_table(p: &ParamSet, labels: &[String]) -> AssociationTable {
    AssociationTable { labels: labels.to_vec(), params: p.clone() }
}

/// Recovered quantities for one dyad, oriented as stored in the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DyadMeasures {
    pub dyad: String,
    /// (x_ij + φπ_rs) / (x_ij + x_ji + φ).
    pub rho_hat_ij: f64,
    pub rho_hat_ji: f64,
    /// Exact posterior mean of ρ_ij under the fitted model.
    pub rho_mean_ij: f64,
    /// E[γ_{i∧j} | x].
    pub gamma_hat: f64,
    /// E[ρ_ij γ_{i∧j} | x] / π_rs.
    pub lambda_star_ij: f64,
    pub lambda_star_ji: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedMeasures {
    pub dyads: Vec<DyadMeasures>,
    pub table: AssociationTable,
}

/// Per-dyad recovered quantities plus the association table. `estep` must
/// be the E-step at `p`.
pub fn derived_measures(
    data: &InteractionData,
    p: &ParamSet,
    estep: &EStepState,
) -> Result<DerivedMeasures, InferenceError> {
    if estep.len() != data.len() {
        return Err(InferenceError::Length { got: estep.len(), expected: data.len() });
    }
    let dyads = data
        .dyads()
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let (pi, phi) = (p.pi(d.r, d.s), p.phi(d.r, d.s));
            let total = d.total() as f64 + phi;
            let rho_hat_ij = (d.x_ij as f64 + phi * pi) / total;
            DyadMeasures {
                dyad: data.dyad_label(d),
                rho_hat_ij,
                rho_hat_ji: 1.0 - rho_hat_ij,
                rho_mean_ij: estep.rho_mean_ij[k],
                gamma_hat: estep.gamma_dyad[k],
                lambda_star_ij: estep.gamma_arc_ij[k] / pi,
                lambda_star_ji: estep.gamma_arc_ji[k] / p.pi(d.s, d.r),
            }
        })
        .collect();
    Ok(DerivedMeasures { dyads, table: association_table(p, data.partition().block_labels()) })
}
