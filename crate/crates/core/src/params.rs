//! The parameter set Φ and its unconstrained coordinates.
//!
//! Blocks are zero-based here, so the reference block is 0: α_0 = β_0 = 1,
//! μ_{0∧s} = 1, π_ss = 0.5 and π_rs + π_sr = 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bound on |log ν| and |log φ|.
pub const LOG_CAP: f64 = 30.0;

/// True when an unconstrained coordinate sits on the cap. The slack absorbs
/// the roundoff of `logit(expit(±30))`.
pub fn at_log_cap(v: f64) -> bool {
    v.abs() >= LOG_CAP - 1e-2
}

pub const PARAMS_VERSION: &str = "lassb-params/1";

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("number of blocks must be at least 1")]
    NoBlocks,
    #[error("coordinate vector has length {got}, expected {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("coordinate {index} is not finite")]
    NonFinite { index: usize },
    #[error("{name} = {value} is out of range")]
    OutOfRange { name: String, value: f64 },
    #[error("{name} is fixed by the identifiability constraints")]
    Constrained { name: String },
    #[error("{name} violates a constraint")]
    Violated { name: String },
    #[error("unsupported params version `{0}`")]
    Version(String),
    #[error("params json: {0}")]
    Json(String),
}

/// Full parameter set for `S` blocks. Matrices are dense `S × S`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    s: usize,
    theta: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    pi: Vec<f64>,
    phi: Vec<f64>,
}

/// `2S² + 2S − 1`.
pub fn free_param_count(num_blocks: usize) -> Result<usize, ParamError> {
    if num_blocks == 0 {
        return Err(ParamError::NoBlocks);
    }
    Ok(2 * num_blocks * num_blocks + 2 * num_blocks - 1)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn positive(name: impl FnOnce() -> String, value: f64) -> Result<f64, ParamError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ParamError::OutOfRange { name: name(), value })
    }
}

impl ParamSet {
    /// Unit rates, ν = φ = 1 and π = 0.5 everywhere.
    pub fn new(num_blocks: usize) -> Result<Self, ParamError> {
        if num_blocks == 0 {
            return Err(ParamError::NoBlocks);
        }
        let n2 = num_blocks * num_blocks;
        Ok(Self {
            s: num_blocks,
            theta: 1.0,
            alpha: vec![1.0; num_blocks],
            beta: vec![1.0; num_blocks],
            mu: vec![1.0; n2],
            nu: vec![1.0; n2],
            pi: vec![0.5; n2],
            phi: vec![1.0; n2],
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.s
    }

    fn at(&self, r: usize, s: usize) -> usize {
        assert!(r < self.s && s < self.s, "block index out of range");
        r * self.s + s
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn alpha(&self, r: usize) -> f64 {
        self.alpha[r]
    }
    pub fn beta(&self, s: usize) -> f64 {
        self.beta[s]
    }
    pub fn mu(&self, r: usize, s: usize) -> f64 {
        self.mu[self.at(r, s)]
    }
    pub fn nu(&self, r: usize, s: usize) -> f64 {
        self.nu[self.at(r, s)]
    }
    pub fn pi(&self, r: usize, s: usize) -> f64 {
        self.pi[self.at(r, s)]
    }
    pub fn phi(&self, r: usize, s: usize) -> f64 {
        self.phi[self.at(r, s)]
    }

    pub fn set_theta(&mut self, v: f64) -> Result<(), ParamError> {
        self.theta = positive(|| "theta".into(), v)?;
        Ok(())
    }

    pub fn set_alpha(&mut self, r: usize, v: f64) -> Result<(), ParamError> {
        if r == 0 {
            return Err(ParamError::Constrained { name: "alpha_1".into() });
        }
        self.alpha[r] = positive(|| format!("alpha_{}", r + 1), v)?;
        Ok(())
    }

    pub fn set_beta(&mut self, s: usize, v: f64) -> Result<(), ParamError> {
        if s == 0 {
            return Err(ParamError::Constrained { name: "beta_1".into() });
        }
        self.beta[s] = positive(|| format!("beta_{}", s + 1), v)?;
        Ok(())
    }

    pub fn set_mu(&mut self, r: usize, s: usize, v: f64) -> Result<(), ParamError> {
        if r == 0 || s == 0 {
            return Err(ParamError::Constrained { name: format!("mu_{}^{}", r + 1, s + 1) });
        }
        let v = positive(|| format!("mu_{}^{}", r + 1, s + 1), v)?;
        self.set_sym(Field::Mu, r, s, v);
        Ok(())
    }

    pub fn set_nu(&mut self, r: usize, s: usize, v: f64) -> Result<(), ParamError> {
        let v = positive(|| format!("nu_{}^{}", r + 1, s + 1), v)?;
        self.set_sym(Field::Nu, r, s, v);
        Ok(())
    }

    pub fn set_phi(&mut self, r: usize, s: usize, v: f64) -> Result<(), ParamError> {
        let v = positive(|| format!("phi_{}^{}", r + 1, s + 1), v)?;
        self.set_sym(Field::Phi, r, s, v);
        Ok(())
    }

    /// Sets π_rs and π_sr = 1 − π_rs.
    pub fn set_pi(&mut self, r: usize, s: usize, v: f64) -> Result<(), ParamError> {
        if r == s {
            return Err(ParamError::Constrained { name: format!("pi_{}{}", r + 1, s + 1) });
        }
        if !(v > 0.0 && v < 1.0) {
            return Err(ParamError::OutOfRange { name: format!("pi_{}{}", r + 1, s + 1), value: v });
        }
        let (a, b) = (self.at(r, s), self.at(s, r));
        self.pi[a] = v;
        self.pi[b] = 1.0 - v;
        Ok(())
    }

    fn set_sym(&mut self, field: Field, r: usize, s: usize, v: f64) {
        let (a, b) = (self.at(r, s), self.at(s, r));
        let m = match field {
            Field::Mu => &mut self.mu,
            Field::Nu => &mut self.nu,
            Field::Phi => &mut self.phi,
        };
        m[a] = v;
        m[b] = v;
    }

    /// τ_rs = θ α_r β_s μ_{r∧s}.
    pub fn tau(&self, r: usize, s: usize) -> f64 {
        self.theta * self.alpha[r] * self.beta[s] * self.mu(r, s)
    }

    /// m_rs = τ_rs π_rs, the expected count on an arc of `B_rs`.
    pub fn mean_interaction(&self, r: usize, s: usize) -> f64 {
        self.tau(r, s) * self.pi(r, s)
    }

    /// Coordinates on the optimization scale, in the order
    /// log θ, log α_2.., log β_2.., log μ_{r∧s} (1 ≤ r ≤ s), log ν_{r∧s},
    /// logit π_rs (r < s), log φ_{r∧s}.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let s = self.s;
        let mut v = Vec::with_capacity(2 * s * s + 2 * s - 1);
        v.push(self.theta.ln());
        v.extend(self.alpha[1..].iter().map(|a| a.ln()));
        v.extend(self.beta[1..].iter().map(|b| b.ln()));
        for r in 1..s {
            for c in r..s {
                v.push(self.mu(r, c).ln());
            }
        }
        for r in 0..s {
            for c in r..s {
                v.push(self.nu(r, c).ln());
            }
        }
        for r in 0..s {
            for c in r + 1..s {
                v.push(logit(self.pi(r, c)));
            }
        }
        for r in 0..s {
            for c in r..s {
                v.push(self.phi(r, c).ln());
            }
        }
        v
    }

    /// Maps unconstrained coordinates to the natural scale one at a time:
    /// `expit` for the π coordinates, `exp` for the rest.
    pub fn natural_scale(num_blocks: usize, v: &[f64]) -> Result<Vec<f64>, ParamError> {
        let expected = free_param_count(num_blocks)?;
        if v.len() != expected {
            return Err(ParamError::WrongLength { got: v.len(), expected });
        }
        let s = num_blocks;
        let pi_start = 1 + 2 * (s - 1) + s * (s - 1) / 2 + s * (s + 1) / 2;
        let pi_end = pi_start + s * (s - 1) / 2;
        Ok(v.iter()
            .enumerate()
            .map(|(k, &x)| if (pi_start..pi_end).contains(&k) { expit(x) } else { x.exp() })
            .collect())
    }

    pub fn from_unconstrained(num_blocks: usize, v: &[f64]) -> Result<Self, ParamError> {
        let expected = free_param_count(num_blocks)?;
        if v.len() != expected {
            return Err(ParamError::WrongLength { got: v.len(), expected });
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(ParamError::NonFinite { index });
        }
        let s = num_blocks;
        let mut p = Self::new(s)?;
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("length checked");
        p.set_theta(next().exp())?;
        for r in 1..s {
            p.set_alpha(r, next().exp())?;
        }
        for r in 1..s {
            p.set_beta(r, next().exp())?;
        }
        for r in 1..s {
            for c in r..s {
                p.set_mu(r, c, next().exp())?;
            }
        }
        for r in 0..s {
            for c in r..s {
                p.set_nu(r, c, next().exp())?;
            }
        }
        for r in 0..s {
            for c in r + 1..s {
                p.set_pi(r, c, expit(next()))?;
            }
        }
        for r in 0..s {
            for c in r..s {
                p.set_phi(r, c, next().exp())?;
            }
        }
        Ok(p)
    }

    /// Names matching [`ParamSet::to_unconstrained`], e.g. `alpha_M`,
    /// `mu_M^M`, `pi_FM`.
    pub fn coordinate_names(&self, labels: &[String]) -> Vec<String> {
        let s = self.s;
        let l = |k: usize| labels.get(k).cloned().unwrap_or_else(|| (k + 1).to_string());
        let mut names = vec!["theta".to_string()];
        names.extend((1..s).map(|r| format!("alpha_{}", l(r))));
        names.extend((1..s).map(|r| format!("beta_{}", l(r))));
        for r in 1..s {
            for c in r..s {
                names.push(format!("mu_{}^{}", l(r), l(c)));
            }
        }
        for r in 0..s {
            for c in r..s {
                names.push(format!("nu_{}^{}", l(r), l(c)));
            }
        }
        for r in 0..s {
            for c in r + 1..s {
                names.push(format!("pi_{}{}", l(r), l(c)));
            }
        }
        for r in 0..s {
            for c in r..s {
                names.push(format!("phi_{}^{}", l(r), l(c)));
            }
        }
        names
    }

    /// Checks every constraint; used after deserialization.
    pub fn validate(&self) -> Result<(), ParamError> {
        let s = self.s;
        let bad = |name: &str| Err(ParamError::Violated { name: name.to_string() });
        positive(|| "theta".into(), self.theta)?;
        if self.alpha.len() != s || self.beta.len() != s {
            return bad("alpha/beta length");
        }
        for m in [&self.mu, &self.nu, &self.pi, &self.phi] {
            if m.len() != s * s {
                return bad("matrix shape");
            }
        }
        if self.alpha[0] != 1.0 || self.beta[0] != 1.0 {
            return bad("alpha_1 = beta_1 = 1");
        }
        for r in 0..s {
            positive(|| format!("alpha_{}", r + 1), self.alpha[r])?;
            positive(|| format!("beta_{}", r + 1), self.beta[r])?;
            for c in 0..s {
                for (name, m) in [("mu", &self.mu), ("nu", &self.nu), ("phi", &self.phi)] {
                    positive(|| format!("{name}_{}^{}", r + 1, c + 1), m[r * s + c])?;
                    if m[r * s + c] != m[c * s + r] {
                        return bad(name);
                    }
                }
                let p = self.pi[r * s + c];
                if !(p > 0.0 && p < 1.0) {
                    return bad("pi in (0,1)");
                }
                if (p + self.pi[c * s + r] - 1.0).abs() > 1e-12 {
                    return bad("pi_rs + pi_sr = 1");
                }
            }
            if self.mu[r] != 1.0 {
                return bad("mu_1^s = 1");
            }
            if self.pi[r * s + r] != 0.5 {
                return bad("pi_ss = 0.5");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ParamsJson::from(self)).expect("plain data serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, ParamError> {
        let raw: ParamsJson = serde_json::from_value(value).map_err(|e| ParamError::Json(e.to_string()))?;
        Self::try_from(raw)
    }
}

enum Field {
    Mu,
    Nu,
    Phi,
}

/// On-disk form: named fields, matrices as nested row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsJson {
    pub version: String,
    pub num_blocks: usize,
    pub theta: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
}

impl From<&ParamSet> for ParamsJson {
    fn from(p: &ParamSet) -> Self {
        let rows = |m: &[f64]| m.chunks(p.s).map(<[f64]>::to_vec).collect();
        Self {
            version: PARAMS_VERSION.to_string(),
            num_blocks: p.s,
            theta: p.theta,
            alpha: p.alpha.clone(),
            beta: p.beta.clone(),
            mu: rows(&p.mu),
            nu: rows(&p.nu),
            pi: rows(&p.pi),
            phi: rows(&p.phi),
        }
    }
}

impl TryFrom<ParamsJson> for ParamSet {
    type Error = ParamError;

    fn try_from(j: ParamsJson) -> Result<Self, ParamError> {
        if j.version != PARAMS_VERSION {
            return Err(ParamError::Version(j.version));
        }
        if j.num_blocks == 0 {
            return Err(ParamError::NoBlocks);
        }
        let s = j.num_blocks;
        let flat = |m: Vec<Vec<f64>>, name: &str| -> Result<Vec<f64>, ParamError> {
            if m.len() != s || m.iter().any(|row| row.len() != s) {
                return Err(ParamError::Violated { name: format!("{name} shape") });
            }
            Ok(m.into_iter().flatten().collect())
        };
        let p = ParamSet {
            s,
            theta: j.theta,
            alpha: j.alpha,
            beta: j.beta,
            mu: flat(j.mu, "mu")?,
            nu: flat(j.nu, "nu")?,
            pi: flat(j.pi, "pi")?,
            phi: flat(j.phi, "phi")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Rounded reference estimates for the two-block (F, M) chat network:
/// block 0 is F, block 1 is M.
pub fn kolkata_estimates() -> ParamSet {
    let mut p = ParamSet::new(2).expect("two blocks");
    p.set_theta(1.42).unwrap();
    p.set_alpha(1, 3.77).unwrap();
    p.set_beta(1, 3.80).unwrap();
    p.set_mu(1, 1, 0.28).unwrap();
    p.set_pi(0, 1, 0.27).unwrap();
    p.set_nu(0, 1, 0.10).unwrap();
    p.set_nu(0, 0, 0.07).unwrap();
    p.set_nu(1, 1, 0.05).unwrap();
    p.set_phi(0, 1, 12.62).unwrap();
    p.set_phi(0, 0, 56940.0).unwrap();
    p.set_phi(1, 1, 71.32).unwrap();
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn free_parameter_counts() {
        assert_eq!(free_param_count(2), Ok(11));
        assert_eq!(free_param_count(1), Ok(3));
        assert_eq!(free_param_count(3), Ok(23));
        assert_eq!(free_param_count(0), Err(ParamError::NoBlocks));
    }

    #[test]
    fn reference_rates() {
        let p = kolkata_estimates();
        assert!((p.tau(1, 0) - 1.42 * 3.77).abs() < 1e-12);
        assert!((p.tau(1, 0) - 5.3534).abs() < 1e-12);
        assert_eq!(ParamSet::new(3).unwrap().tau(2, 1), 1.0);
        assert!((p.mean_interaction(0, 0) - 0.71).abs() < 1e-12);
        // reference 3.93 and 2.85 within rounding
        assert!((p.mean_interaction(1, 0) / 3.93 - 1.0).abs() < 0.02);
        assert!((p.mean_interaction(1, 1) / 2.85 - 1.0).abs() < 0.02);
    }

    #[test]
    fn logit_round_trip() {
        let mut p = ParamSet::new(2).unwrap();
        p.set_pi(0, 1, 0.27).unwrap();
        let v = p.to_unconstrained();
        let idx = p.coordinate_names(&["F".into(), "M".into()]).iter().position(|n| n == "pi_FM").unwrap();
        assert!((v[idx] + 0.9946).abs() < 1e-4);
        let q = ParamSet::from_unconstrained(2, &v).unwrap();
        assert!((q.pi(0, 1) - 0.27).abs() < 1e-15);
        assert!((q.pi(1, 0) - 0.73).abs() < 1e-15);
    }

    #[test]
    fn coordinate_names_for_two_blocks() {
        let p = ParamSet::new(2).unwrap();
        let names = p.coordinate_names(&["F".into(), "M".into()]);
        assert_eq!(
            names,
            [
                "theta", "alpha_M", "beta_M", "mu_M^M", "nu_F^F", "nu_F^M", "nu_M^M", "pi_FM", "phi_F^F", "phi_F^M",
                "phi_M^M"
            ]
        );
    }

    #[test]
    fn rejects_bad_vectors_and_constrained_writes() {
        assert!(matches!(
            ParamSet::from_unconstrained(2, &[0.0; 10]),
            Err(ParamError::WrongLength { got: 10, expected: 11 })
        ));
        let mut v = vec![0.0; 11];
        v[3] = f64::NAN;
        assert_eq!(ParamSet::from_unconstrained(2, &v), Err(ParamError::NonFinite { index: 3 }));
        let mut p = ParamSet::new(2).unwrap();
        assert!(p.set_alpha(0, 2.0).is_err());
        assert!(p.set_mu(0, 1, 2.0).is_err());
        assert!(p.set_pi(1, 1, 0.4).is_err());
        assert!(p.set_nu(0, 1, -1.0).is_err());
    }

    #[test]
    fn json_round_trip_and_version() {
        let p = kolkata_estimates();
        let j = p.to_json();
        assert_eq!(j["version"], PARAMS_VERSION);
        assert_eq!(j["pi"][1][0], 0.73);
        assert_eq!(ParamSet::from_json(j.clone()).unwrap(), p);
        let mut bad = j.clone();
        bad["version"] = "other".into();
        assert!(matches!(ParamSet::from_json(bad), Err(ParamError::Version(_))));
        let mut bad = j;
        bad["pi"][0][0] = 0.4.into();
        assert!(ParamSet::from_json(bad).is_err());
    }

    fn arb_params() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..=4).prop_flat_map(|s| {
            let n = free_param_count(s).unwrap();
            (Just(s), prop::collection::vec(-8.0f64..8.0, n))
        })
    }

    proptest! {
        #[test]
        fn unconstrained_round_trip((s, v) in arb_params()) {
            let p = ParamSet::from_unconstrained(s, &v).unwrap();
            prop_assert!(p.validate().is_ok());
            let w = p.to_unconstrained();
            prop_assert_eq!(w.len(), free_param_count(s).unwrap());
            for (a, b) in v.iter().zip(&w) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{} vs {}", a, b);
            }
            let q = ParamSet::from_unconstrained(s, &w).unwrap();
            prop_assert!((q.theta() - p.theta()).abs() <= 1e-14 * p.theta());
        }

        #[test]
        fn interaction_ratio_identity((s, v) in arb_params().prop_filter("two or more blocks", |(s, _)| *s >= 2)) {
            let p = ParamSet::from_unconstrained(s, &v).unwrap();
            for r in 0..s {
                for c in 0..s {
                    let lhs = p.mean_interaction(r, c) / p.mean_interaction(c, r);
                    let odds = p.pi(r, c) / (1.0 - p.pi(r, c));
                    let rhs = p.alpha(r) / p.alpha(c) * p.beta(c) / p.beta(r) * odds;
                    prop_assert!((lhs / rhs - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
