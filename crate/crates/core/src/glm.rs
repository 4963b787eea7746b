//! Poisson log-linear quasi-symmetry model with offset, fitted by IRLS.
//!
//! One row per arc. The linear predictor of arc (i, j) with i ∈ B_r, j ∈ B_s
//! is η + η^I_r + η^J_s + η^IJ_{r∧s} + offset, with block 0 as reference.

use crate::data::{DyadBlock, InteractionData};
use crate::params::{ParamError, ParamSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GlmError {
    #[error("dyad block {0} has no dyads; the rate design is rank deficient")]
    EmptyDyadBlock(DyadBlock),
    #[error("expected {expected} offsets, got {got}")]
    OffsetLength { got: usize, expected: usize },
    #[error("offset {0} is not finite")]
    NonFiniteOffset(usize),
    #[error("normal equations are not positive definite")]
    RankDeficient,
    #[error("step halving exhausted at iteration {0}")]
    Diverged(usize),
    #[error("expected {expected} coefficients, got {got}")]
    CoefLength { got: usize, expected: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Column layout for `S` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Columns {
    s: usize,
}

impl Columns {
    pub fn new(num_blocks: usize) -> Self {
        Self { s: num_blocks }
    }

    pub fn len(&self) -> usize {
        1 + 2 * (self.s - 1) + self.s * (self.s - 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row_effect(&self, r: usize) -> Option<usize> {
        (r > 0).then_some(r)
    }

    pub fn col_effect(&self, s: usize) -> Option<usize> {
        (s > 0).then(|| self.s - 1 + s)
    }

    /// Shared column of η^IJ_{r∧s}; `None` when either block is the reference.
    pub fn interaction(&self, r: usize, s: usize) -> Option<usize> {
        let (lo, hi) = if r <= s { (r, s) } else { (s, r) };
        if lo == 0 {
            return None;
        }
        // pairs (a, b) with 1 <= a <= b, enumerated row by row
        let before: usize = (1..lo).map(|a| self.s - a).sum();
        Some(2 * self.s - 1 + before + (hi - lo))
    }

    /// Nonzero (all 1.0) columns of an arc in `B_rs`.
    pub fn active(&self, r: usize, s: usize) -> impl Iterator<Item = usize> {
        [Some(0), self.row_effect(r), self.col_effect(s), self.interaction(r, s)].into_iter().flatten()
    }

    pub fn names(&self, labels: &[String]) -> Vec<String> {
        let l = |k: usize| labels.get(k).cloned().unwrap_or_else(|| (k + 1).to_string());
        let mut names = vec!["eta".to_string()];
        names.extend((1..self.s).map(|r| format!("eta_I_{}", l(r))));
        names.extend((1..self.s).map(|s| format!("eta_J_{}", l(s))));
        for a in 1..self.s {
            for b in a..self.s {
                names.push(format!("eta_IJ_{}{}", l(a), l(b)));
            }
        }
        names
    }
}

/// Design for the rate M-step. Rows alternate (i→j, j→i) per dyad.
#[derive(Debug, Clone)]
pub struct QsDesign {
    columns: Columns,
    cols_of_row: Vec<[Option<usize>; 4]>,
    offset: Vec<f64>,
    response: Vec<f64>,
}

/// Builds the design. `offsets[2k]` and `offsets[2k + 1]` belong to the
/// arcs i→j and j→i of dyad `k`.
pub fn build_design(data: &InteractionData, offsets: &[f64]) -> Result<QsDesign, GlmError> {
    let s = data.num_blocks();
    let sizes = data.dyad_block_sizes();
    for b in DyadBlock::all(s) {
        if !sizes.contains_key(&b) {
            return Err(GlmError::EmptyDyadBlock(b));
        }
    }
    if offsets.len() != 2 * data.len() {
        return Err(GlmError::OffsetLength { got: offsets.len(), expected: 2 * data.len() });
    }
    if let Some(k) = offsets.iter().position(|o| !o.is_finite()) {
        return Err(GlmError::NonFiniteOffset(k));
    }
    let columns = Columns::new(s);
    let mut cols_of_row = Vec::with_capacity(offsets.len());
    let mut response = Vec::with_capacity(offsets.len());
    for d in data.dyads() {
        for (r, c, x) in [(d.r, d.s, d.x_ij), (d.s, d.r, d.x_ji)] {
            let mut active = [None; 4];
            for (slot, col) in active.iter_mut().zip(columns.active(r, c)) {
                *slot = Some(col);
            }
            cols_of_row.push(active);
            response.push(x as f64);
        }
    }
    Ok(QsDesign { columns, cols_of_row, offset: offsets.to_vec(), response })
}

impl QsDesign {
    pub fn columns(&self) -> Columns {
        self.columns
    }

    pub fn num_rows(&self) -> usize {
        self.response.len()
    }

    fn linear(&self, row: usize, coef: &[f64]) -> f64 {
        self.offset[row] + self.cols_of_row[row].iter().flatten().map(|&c| coef[c]).sum::<f64>()
    }

    pub fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        (0..self.num_rows()).map(|k| self.linear(k, coef).exp()).collect()
    }

    pub fn deviance(&self, coef: &[f64]) -> f64 {
        self.fitted(coef).iter().zip(&self.response).map(|(&m, &y)| unit_deviance(y, m)).sum()
    }

    /// Σ_rows column · (y − m̂) for every column.
    pub fn score(&self, coef: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.columns.len()];
        for (k, m) in self.fitted(coef).into_iter().enumerate() {
            for &c in self.cols_of_row[k].iter().flatten() {
                g[c] += self.response[k] - m;
            }
        }
        g
    }
}

fn unit_deviance(y: f64, m: f64) -> f64 {
    if y > 0.0 {
        2.0 * (y * (y / m).ln() - (y - m))
    } else {
        2.0 * m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 100, max_halvings: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance_trace: Vec<f64>,
    /// Set when the normal matrix looked ill conditioned (> 1e12).
    pub ill_conditioned: bool,
}

const WEIGHT_FLOOR: f64 = 1e-12;
const CONDITION_WARN: f64 = 1e12;

/// IRLS from a cold start.
pub fn irls_fit(design: &QsDesign, tol: f64, max_iter: usize) -> Result<GlmFit, GlmError> {
    irls_fit_from(design, None, IrlsOptions { tol, max_iter, ..IrlsOptions::default() })
}

/// IRLS with an optional starting coefficient vector.
pub fn irls_fit_from(design: &QsDesign, start: Option<&[f64]>, opts: IrlsOptions) -> Result<GlmFit, GlmError> {
    let p = design.columns.len();
    let mut coef = match start {
        Some(c) if c.len() == p && c.iter().all(|x| x.is_finite()) => c.to_vec(),
        Some(c) => return Err(GlmError::CoefLength { got: c.len(), expected: p }),
        None => cold_start(design),
    };
    let mut dev = design.deviance(&coef);
    let mut trace = vec![dev];
    let mut ill_conditioned = false;
    for iter in 1..=opts.max_iter {
        let (step, ill) = newton_step(design, &coef)?;
        ill_conditioned |= ill;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = coef.iter().zip(&step).map(|(c, d)| c + scale * d).collect();
            let trial_dev = design.deviance(&trial);
            // the deviance is convex in the coefficients, so a score that
            // still points along the step certifies descent below roundoff
            let uphill = || design.score(&trial).iter().zip(&step).map(|(g, d)| g * d).sum::<f64>() >= 0.0;
            if trial_dev.is_finite() && (trial_dev <= dev || uphill()) {
                accepted = Some((trial, trial_dev.min(dev)));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, next_dev)) = accepted else {
            // no descent left: the current point is optimal to rounding
            if step.iter().zip(&coef).all(|(d, c)| d.abs() <= 1e-10 * (1.0 + c.abs())) {
                return Ok(GlmFit {
                    coefficients: coef,
                    converged: true,
                    iterations: iter,
                    deviance_trace: trace,
                    ill_conditioned,
                });
            }
            return Err(GlmError::Diverged(iter));
        };
        let change = (dev - next_dev).abs() / (next_dev.abs() + 0.1);
        coef = next;
        dev = next_dev;
        trace.push(dev);
        if change < opts.tol {
            return Ok(GlmFit {
                coefficients: coef,
                converged: true,
                iterations: iter,
                deviance_trace: trace,
                ill_conditioned,
            });
        }
    }
    Ok(GlmFit {
        coefficients: coef,
        converged: false,
        iterations: opts.max_iter,
        deviance_trace: trace,
        ill_conditioned,
    })
}

/// Cell-mean start: intercept from the overall rate, other columns 0.
fn cold_start(design: &QsDesign) -> Vec<f64> {
    let y: f64 = design.response.iter().sum::<f64>() + 0.5;
    let e: f64 = design.offset.iter().map(|o| o.exp()).sum();
    let mut coef = vec![0.0; design.columns.len()];
    coef[0] = (y / e).ln();
    coef
}

/// Solves (XᵀWX) δ = Xᵀ(y − m) at `coef`, W = diag(m).
fn newton_step(design: &QsDesign, coef: &[f64]) -> Result<(Vec<f64>, bool), GlmError> {
    let p = design.columns.len();
    let mut xtwx = vec![0.0; p * p];
    let mut grad = vec![0.0; p];
    for k in 0..design.num_rows() {
        let m = design.linear(k, coef).exp();
        let w = m.max(WEIGHT_FLOOR);
        let resid = design.response[k] - m;
        let cols = &design.cols_of_row[k];
        for &a in cols.iter().flatten() {
            grad[a] += resid;
            for &b in cols.iter().flatten() {
                xtwx[a * p + b] += w;
            }
        }
    }
    let (l, cond) = cholesky(&xtwx, p).ok_or(GlmError::RankDeficient)?;
    Ok((cholesky_solve(&l, p, &grad), cond > CONDITION_WARN))
}

/// Lower Cholesky factor and a diagonal-ratio condition estimate.
fn cholesky(a: &[f64], n: usize) -> Option<(Vec<f64>, f64)> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let diag = (0..n).map(|i| l[i * n + i]);
    let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
    Some((l, (hi / lo).powi(2)))
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Rate block {θ, α, β, μ} read off GLM coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates {
    pub theta: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Dense `S × S`, symmetric.
    pub mu: Vec<f64>,
}

pub fn extract_rates(coef: &[f64], num_blocks: usize) -> Result<Rates, GlmError> {
    let cols = Columns::new(num_blocks);
    if coef.len() != cols.len() {
        return Err(GlmError::CoefLength { got: coef.len(), expected: cols.len() });
    }
    let e = |c: Option<usize>| c.map_or(1.0, |k| coef[k].exp());
    let s = num_blocks;
    Ok(Rates {
        theta: coef[0].exp(),
        alpha: (0..s).map(|r| e(cols.row_effect(r))).collect(),
        beta: (0..s).map(|c| e(cols.col_effect(c))).collect(),
        mu: (0..s * s).map(|k| e(cols.interaction(k / s, k % s))).collect(),
    })
}

impl Rates {
    pub fn apply(&self, p: &mut ParamSet) -> Result<(), GlmError> {
        let s = p.num_blocks();
        p.set_theta(self.theta)?;
        for r in 1..s {
            p.set_alpha(r, self.alpha[r])?;
            p.set_beta(r, self.beta[r])?;
            for c in r..s {
                p.set_mu(r, c, self.mu[r * s + c])?;
            }
        }
        Ok(())
    }
}

/// Inverse of [`extract_rates`]: coefficients reproducing the rates of `p`.
pub fn rate_coefficients(p: &ParamSet) -> Vec<f64> {
    let s = p.num_blocks();
    let cols = Columns::new(s);
    let mut coef = vec![0.0; cols.len()];
    coef[0] = p.theta().ln();
    for r in 1..s {
        coef[cols.row_effect(r).unwrap()] = p.alpha(r).ln();
        coef[cols.col_effect(r).unwrap()] = p.beta(r).ln();
        for c in r..s {
            coef[cols.interaction(r, c).unwrap()] = p.mu(r, c).ln();
        }
    }
    coef
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlockPartition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_data(s: usize, dyads_per_block: usize, seed: u64) -> InteractionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_block = 2 * dyads_per_block;
        let rows: Vec<(String, String)> =
            (0..s * per_block).map(|k| (format!("n{k:04}"), format!("b{}", k / per_block))).collect();
        let p = Arc::new(BlockPartition::from_rows(rows, None).unwrap());
        let mut arcs = Vec::new();
        for a in 0..s {
            for b in a..s {
                for k in 0..dyads_per_block {
                    let i = format!("n{:04}", a * per_block + k);
                    let j = format!("n{:04}", b * per_block + dyads_per_block + k);
                    arcs.push((i.clone(), j.clone(), rng.random_range(0..9i64)));
                    arcs.push((j, i, rng.random_range(0..4i64)));
                }
            }
        }
        InteractionData::from_arcs(p, arcs).unwrap()
    }

    fn random_offsets(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.5..1.0)).collect()
    }

    #[test]
    fn column_layout() {
        let c = Columns::new(2);
        assert_eq!(c.len(), 4);
        assert_eq!(c.names(&["F".into(), "M".into()]), ["eta", "eta_I_M", "eta_J_M", "eta_IJ_MM"]);
        assert_eq!(Columns::new(1).len(), 1);
        let c3 = Columns::new(3);
        assert_eq!(c3.len(), 8);
        let mut inter: Vec<usize> =
            [(1, 1), (1, 2), (2, 2)].iter().map(|&(a, b)| c3.interaction(a, b).unwrap()).collect();
        inter.sort();
        assert_eq!(inter, [5, 6, 7]);
        assert_eq!(c3.interaction(2, 1), c3.interaction(1, 2));
        assert_eq!(c3.interaction(0, 2), None);
    }

    #[test]
    fn single_cell_saturated_mean() {
        let p = Arc::new(BlockPartition::from_rows([("a", "F"), ("b", "F")], None).unwrap());
        let data = InteractionData::from_arcs(p, [("a", "b", 7), ("b", "a", 7)]).unwrap();
        let fit = irls_fit(&build_design(&data, &[0.0, 0.0]).unwrap(), 1e-14, 50).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_dyad_block_is_rejected() {
        let p = Arc::new(BlockPartition::from_rows([("a", "F"), ("b", "M"), ("c", "F")], None).unwrap());
        let data = InteractionData::from_arcs(p, [("a", "b", 1), ("a", "c", 2)]).unwrap();
        let err = build_design(&data, &[0.0; 4]).unwrap_err();
        assert_eq!(err, GlmError::EmptyDyadBlock(DyadBlock::new(1, 1)));
        assert!(matches!(build_design(&random_data(2, 3, 1), &[0.0; 3]), Err(GlmError::OffsetLength { .. })));
    }

    #[test]
    fn offset_shift_moves_intercept_only() {
        let data = random_data(2, 10, 3);
        let off = random_offsets(2 * data.len(), 4);
        let shifted: Vec<f64> = off.iter().map(|o| o + 0.7).collect();
        let a = irls_fit(&build_design(&data, &off).unwrap(), 1e-14, 100).unwrap();
        let b = irls_fit(&build_design(&data, &shifted).unwrap(), 1e-14, 100).unwrap();
        assert!((a.coefficients[0] - 0.7 - b.coefficients[0]).abs() < 1e-9);
        for k in 1..4 {
            assert!((a.coefficients[k] - b.coefficients[k]).abs() < 1e-9);
        }
    }

    /// Newton on the aggregated likelihood Σ_rs Y_rs ln τ_rs − τ_rs E_rs in
    /// (ln θ, ln α_2, ln β_2, ln μ_22), with analytic derivatives.
    fn newton_oracle(data: &InteractionData, off: &[f64]) -> [f64; 4] {
        let mut y = [[0.0; 2]; 2];
        let mut e = [[0.0; 2]; 2];
        for (k, d) in data.dyads().iter().enumerate() {
            y[d.r][d.s] += d.x_ij as f64;
            e[d.r][d.s] += off[2 * k].exp();
            y[d.s][d.r] += d.x_ji as f64;
            e[d.s][d.r] += off[2 * k + 1].exp();
        }
        let ind = |r: usize, s: usize| -> [f64; 4] {
            [1.0, (r == 1) as u8 as f64, (s == 1) as u8 as f64, (r == 1 && s == 1) as u8 as f64]
        };
        let mut v = [0.0; 4];
        for _ in 0..100 {
            let mut g = [0.0; 4];
            let mut h = [[0.0; 4]; 4];
            for r in 0..2 {
                for s in 0..2 {
                    let z = ind(r, s);
                    let lin: f64 = (0..4).map(|k| z[k] * v[k]).sum();
                    let m = lin.exp() * e[r][s];
                    for a in 0..4 {
                        g[a] += z[a] * (y[r][s] - m);
                        for b in 0..4 {
                            h[a][b] += z[a] * z[b] * m;
                        }
                    }
                }
            }
            // Gaussian elimination on H δ = g
            let mut aug = [[0.0; 5]; 4];
            for a in 0..4 {
                aug[a][..4].copy_from_slice(&h[a]);
                aug[a][4] = g[a];
            }
            for col in 0..4 {
                let piv = (col..4).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())).unwrap();
                aug.swap(col, piv);
                for row in 0..4 {
                    if row != col {
                        let f = aug[row][col] / aug[col][col];
                        for k in col..5 {
                            aug[row][k] -= f * aug[col][k];
                        }
                    }
                }
            }
            for a in 0..4 {
                v[a] += aug[a][4] / aug[a][a];
            }
        }
        v
    }

    #[test]
    fn matches_newton_oracle() {
        for seed in 0..5 {
            let data = random_data(2, 5, 100 + seed);
            assert_eq!(data.len(), 15);
            let off = random_offsets(2 * data.len(), 200 + seed);
            let fit = irls_fit(&build_design(&data, &off).unwrap(), 1e-15, 100).unwrap();
            let oracle = newton_oracle(&data, &off);
            for k in 0..4 {
                assert!((fit.coefficients[k] - oracle[k]).abs() < 1e-8, "{:?} vs {:?}", fit.coefficients, oracle);
            }
        }
    }

    #[test]
    fn scores_vanish_and_deviance_decreases() {
        for s in 1..=3 {
            let data = random_data(s, 8, 40 + s as u64);
            let design = build_design(&data, &random_offsets(2 * data.len(), 50)).unwrap();
            let fit = irls_fit(&design, 1e-14, 100).unwrap();
            assert!(fit.converged);
            assert!(design.score(&fit.coefficients).iter().all(|g| g.abs() < 1e-6));
            assert!(fit.deviance_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn warm_start_from_far_point_halves_steps() {
        let data = random_data(2, 10, 9);
        let design = build_design(&data, &random_offsets(2 * data.len(), 10)).unwrap();
        let opts = IrlsOptions::default();
        let fit = irls_fit_from(&design, Some(&[12.0, -9.0, 8.0, 15.0]), opts).unwrap();
        assert!(fit.converged);
        assert!(fit.deviance_trace.windows(2).all(|w| w[1] <= w[0]));
        let cold = irls_fit(&design, opts.tol, opts.max_iter).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&cold.coefficients) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn quasi_symmetric_ratio_depends_on_block_and_offsets() {
        let data = random_data(2, 6, 77);
        let off = random_offsets(2 * data.len(), 78);
        let design = build_design(&data, &off).unwrap();
        let m = design.fitted(&irls_fit(&design, 1e-14, 100).unwrap().coefficients);
        let mut ratio: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
        for (k, d) in data.dyads().iter().enumerate() {
            let r = (m[2 * k] / m[2 * k + 1]).ln() - (off[2 * k] - off[2 * k + 1]);
            let prev = *ratio.entry((d.r, d.s)).or_insert(r);
            assert!((prev - r).abs() < 1e-10);
        }
    }

    #[test]
    fn rate_extraction() {
        let zero = extract_rates(&[0.0; 4], 2).unwrap();
        assert_eq!(zero.theta, 1.0);
        assert!(zero.alpha.iter().chain(&zero.beta).chain(&zero.mu).all(|&v| v == 1.0));
        let coef = [1.42f64.ln(), 3.77f64.ln(), 3.80f64.ln(), 0.28f64.ln()];
        let rates = extract_rates(&coef, 2).unwrap();
        let mut p = ParamSet::new(2).unwrap();
        rates.apply(&mut p).unwrap();
        let reference = crate::params::kolkata_estimates();
        for (r, s) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!((p.tau(r, s) / reference.tau(r, s) - 1.0).abs() < 1e-14);
        }
        for c in [-30.0, -3.0, 0.5, 30.0] {
            let back = rate_coefficients(&{
                let mut q = ParamSet::new(2).unwrap();
                extract_rates(&[c, -c, c / 2.0, c], 2).unwrap().apply(&mut q).unwrap();
                q
            });
            assert!((back[0] - c).abs() < 1e-13 && (back[1] + c).abs() < 1e-13);
        }
    }
}
