//! Nelder–Mead maximization for the small M-step sub-problems.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite at the start point")]
    NonFiniteStart,
    #[error("invalid simplex options: {0}")]
    InvalidOptions(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub initial_step: f64,
    /// Absolute spread of objective values across the simplex.
    pub tol_f: f64,
    /// Largest vertex distance from the best vertex (max-norm).
    pub tol_x: f64,
    pub max_evals: usize,
    pub restarts: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { initial_step: 0.5, tol_f: 1e-12, tol_x: 1e-10, max_evals: 4000, restarts: 1 }
    }
}

impl SimplexOptions {
    fn validate(&self, dim: usize) -> Result<(), OptimError> {
        if !(self.tol_f > 0.0 && self.tol_x > 0.0) {
            return Err(OptimError::InvalidOptions("tolerances must be positive"));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(OptimError::InvalidOptions("initial step must be positive"));
        }
        if self.max_evals < dim + 1 {
            return Err(OptimError::InvalidOptions("max_evals below dimension + 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    /// False when `max_evals` ran out; `argmax` is then the best point seen.
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Maximizes `f` from `x0`. Non-finite objective values count as −∞.
/// After convergence the search restarts from the best point with half the
/// previous initial step, up to `opts.restarts` times.
pub fn nelder_mead_max<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> Result<SimplexResult, OptimError>
where
    F: FnMut(&[f64]) -> f64,
{
    opts.validate(x0.len())?;
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(OptimError::NonFiniteStart);
    }
    let mut evals = 1;
    let mut best = (x0.to_vec(), f0);
    let mut step = opts.initial_step;
    let mut converged = false;
    for _ in 0..=opts.restarts {
        let budget = opts.max_evals.saturating_sub(evals);
        if budget < x0.len() + 1 {
            break;
        }
        let run = simplex_run(&mut f, &best.0, best.1, step, opts, budget);
        evals += run.evals;
        converged = run.converged;
        let improved = run.value > best.1;
        if run.value >= best.1 {
            best = (run.argmax, run.value);
        }
        if !converged || !improved {
            break;
        }
        step *= 0.5;
    }
    Ok(SimplexResult { argmax: best.0, value: best.1, evals, converged })
}

fn score(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

fn simplex_run<F>(f: &mut F, x0: &[f64], f0: f64, step: f64, opts: &SimplexOptions, budget: usize) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let d = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        score(f(x))
    };
    let mut pts: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for k in 0..d {
        let mut x = x0.to_vec();
        x[k] += step;
        let v = eval(&x, &mut evals);
        pts.push((x, v));
    }
    loop {
        // best first
        pts.sort_by(|a, b| b.1.total_cmp(&a.1));
        let spread = pts[0].1 - pts[d].1;
        let diameter =
            pts[1..].iter().flat_map(|(x, _)| x.iter().zip(&pts[0].0).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.tol_f) || diameter <= opts.tol_x {
            return SimplexResult { argmax: pts[0].0.clone(), value: pts[0].1, evals, converged: true };
        }
        if evals + 2 > budget {
            return SimplexResult { argmax: pts[0].0.clone(), value: pts[0].1, evals, converged: false };
        }
        let centroid: Vec<f64> = (0..d).map(|k| pts[..d].iter().map(|(x, _)| x[k]).sum::<f64>() / d as f64).collect();
        let worst = pts[d].clone();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(REFLECT);
        let fr = eval(&xr, &mut evals);
        if fr > pts[0].1 {
            let xe = along(REFLECT * EXPAND);
            let fe = eval(&xe, &mut evals);
            pts[d] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > pts[d - 1].1 {
            pts[d] = (xr, fr);
            continue;
        }
        let outside = fr > worst.1;
        let xc = along(if outside { REFLECT * CONTRACT } else { -CONTRACT });
        let fc = eval(&xc, &mut evals);
        if (outside && fc >= fr) || (!outside && fc > worst.1) {
            pts[d] = (xc, fc);
            continue;
        }
        let best = pts[0].0.clone();
        for p in pts.iter_mut().skip(1) {
            let x: Vec<f64> = best.iter().zip(&p.0).map(|(b, x)| b + SHRINK * (x - b)).collect();
            let v = eval(&x, &mut evals);
            *p = (x, v);
        }
    }
}
