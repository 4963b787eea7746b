//! Method-of-moments starting values.

use std::collections::BTreeMap;

use crate::data::{DyadBlock, InteractionData};
use crate::glm::{build_design, extract_rates, irls_fit_from, IrlsOptions};
use crate::params::{ParamSet, LOG_CAP};

use super::{block_name, Diagnostic, EmError};

#[derive(Default)]
struct Moments {
    dyads: usize,
    total: f64,
    rho: f64,
    rho_q: f64,
}

/// Starting values from x* = x + ε. See [`init_params_with_diagnostics`].
pub fn init_params(data: &InteractionData, epsilon: f64) -> Result<ParamSet, EmError> {
    init_params_with_diagnostics(data, epsilon).map(|(p, _)| p)
}

/// γ⁽⁰⁾ = x*_{i∧j} / x̄*_{r∧s} and ρ⁽⁰⁾ = x*_ij / x*_{i∧j} give
/// ν⁽⁰⁾ = 1 / mean (γ⁽⁰⁾ − 1)², π⁽⁰⁾ = mean ρ⁽⁰⁾ and
/// φ⁽⁰⁾ = E / (π(1−π) − E) with E = mean ρ⁽⁰⁾(1 − ρ⁽⁰⁾). Rates come from the
/// quasi-symmetry GLM with offset ln γ⁽⁰⁾_ij. Degenerate moments are capped
/// at e^30 and reported.
pub fn init_params_with_diagnostics(
    data: &InteractionData,
    epsilon: f64,
) -> Result<(ParamSet, Vec<Diagnostic>), EmError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(EmError::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let s = data.num_blocks();
    let labels = data.partition().block_labels();
    let mut diags = Vec::new();
    let mut moments: BTreeMap<DyadBlock, Moments> = BTreeMap::new();
    for d in data.dyads() {
        let (xi, xj) = (d.x_ij as f64 + epsilon, d.x_ji as f64 + epsilon);
        let m = moments.entry(d.dyad_block()).or_default();
        m.dyads += 1;
        m.total += xi + xj;
        let rho = xi / (xi + xj);
        m.rho += rho;
        m.rho_q += rho * (1.0 - rho);
    }
    for b in DyadBlock::all(s) {
        match moments.get(&b) {
            None => return Err(EmError::EmptyDyadBlock(block_name(b, labels))),
            Some(m) if m.dyads < 3 => {
                diags.push(Diagnostic::SmallBlock { block: block_name(b, labels), dyads: m.dyads })
            }
            _ => {}
        }
    }
    let mean_of = |b: DyadBlock| {
        let m = &moments[&b];
        m.total / m.dyads as f64
    };
    let mut sq_dev: BTreeMap<DyadBlock, f64> = BTreeMap::new();
    let mut offsets = Vec::with_capacity(2 * data.len());
    for d in data.dyads() {
        let b = d.dyad_block();
        let mean = mean_of(b);
        let (xi, xj) = (d.x_ij as f64 + epsilon, d.x_ji as f64 + epsilon);
        *sq_dev.entry(b).or_default() += ((xi + xj) / mean - 1.0).powi(2);
        offsets.push((xi / mean).ln());
        offsets.push((xj / mean).ln());
    }

    let mut p = ParamSet::new(s)?;
    let cap = LOG_CAP.exp();
    let floor = (-LOG_CAP).exp();
    for (&b, m) in &moments {
        let (r, c) = (b.low(), b.high());
        let n = m.dyads as f64;
        let var = sq_dev[&b] / n;
        let nu = if var > 0.0 { 1.0 / var } else { f64::INFINITY };
        let nu = if nu > cap {
            diags.push(Diagnostic::InitCapped {
                parameter: format!("nu_{}", block_name(b, labels)),
                reason: "relative dyad strengths have no spread".into(),
            });
            cap
        } else {
            nu.max(floor)
        };
        p.set_nu(r, c, nu)?;
        let pi = if r == c { 0.5 } else { m.rho / n };
        if r != c {
            p.set_pi(r, c, pi)?;
        }
        let e = m.rho_q / n;
        let denom = pi * (1.0 - pi) - e;
        let phi = if denom > 0.0 { e / denom } else { f64::INFINITY };
        let phi = if phi > cap {
            diags.push(Diagnostic::InitCapped {
                parameter: format!("phi_{}", block_name(b, labels)),
                reason: "arc shares have no spread".into(),
            });
            cap
        } else {
            phi.max(floor)
        };
        p.set_phi(r, c, phi)?;
    }

    let design = build_design(data, &offsets)?;
    let glm = irls_fit_from(&design, None, IrlsOptions::default())?;
    if !glm.converged {
        diags.push(Diagnostic::GlmNotConverged { iteration: 0 });
    }
    extract_rates(&glm.coefficients, s)?.apply(&mut p)?;
    Ok((p, diags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlockPartition;
    use std::sync::Arc;

    fn one_block(counts: &[(i64, i64)]) -> InteractionData {
        let n = counts.len() + 1;
        let rows: Vec<(String, String)> = (0..n).map(|k| (format!("v{k:02}"), "A".to_string())).collect();
        let part = Arc::new(BlockPartition::from_rows(rows, None).unwrap());
        let mut arcs = Vec::new();
        for (k, &(a, b)) in counts.iter().enumerate() {
            let (i, j) = (format!("v{k:02}"), format!("v{:02}", k + 1));
            arcs.push((i.clone(), j.clone(), a));
            arcs.push((j, i, b));
        }
        InteractionData::from_arcs(part, arcs).unwrap()
    }

    #[test]
    fn hand_evaluated_shape() {
        let data = one_block(&[(0, 0), (1, 1)]);
        let (p, diags) = init_params_with_diagnostics(&data, 0.05).unwrap();
        // γ⁽⁰⁾ = {1/11, 21/11}; mean (γ − 1)² = (10/11)²
        assert!((p.nu(0, 0) - 1.21).abs() < 1e-12, "{}", p.nu(0, 0));
        assert!(diags.iter().any(|d| matches!(d, Diagnostic::SmallBlock { dyads: 2, .. })));
    }

    #[test]
    fn identical_totals_cap_nu_and_even_shares_cap_phi() {
        let data = one_block(&[(2, 2), (2, 2), (2, 2), (2, 2)]);
        let (p, diags) = init_params_with_diagnostics(&data, 0.05).unwrap();
        assert_eq!(p.nu(0, 0), LOG_CAP.exp());
        assert_eq!(p.phi(0, 0), LOG_CAP.exp());
        let capped: Vec<_> = diags
            .iter()
            .filter_map(|d| match d {
                Diagnostic::InitCapped { parameter, .. } => Some(parameter.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(capped, ["nu_A^A", "phi_A^A"]);
    }

    #[test]
    fn rates_reproduce_block_totals() {
        // single block: offsets x*_ij / mean x*_{i∧j} sum to the dyad count
        // over arcs, so the intercept score gives θ = Σx / dyads
        let data = one_block(&[(0, 3), (5, 1), (2, 2)]);
        let p = init_params(&data, 0.05).unwrap();
        let mean = 13.0 / 3.0;
        assert!((p.theta() * p.mu(0, 0) - mean).abs() < 1e-9, "{}", p.theta());
    }

    #[test]
    fn rejects_bad_epsilon_and_empty_block() {
        let data = one_block(&[(1, 0), (0, 1), (2, 2)]);
        assert!(init_params(&data, 0.0).is_err());
        let rows = [("a", "F"), ("b", "F"), ("c", "M")];
        let part = Arc::new(BlockPartition::from_rows(rows, None).unwrap());
        let data = InteractionData::from_arcs(part, [("a", "b", 1i64)]).unwrap();
        assert!(matches!(init_params(&data, 0.05), Err(EmError::EmptyDyadBlock(ref b)) if b == "F^M"));
    }
}
