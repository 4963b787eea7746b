//! Expectations under a beta law by adaptive Gauss–Legendre quadrature.
//!
//! Integration runs on the logit scale `t = ln(ρ / (1 - ρ))`, where the beta
//! density becomes a smooth log-concave bump with exponential tails. Endpoint
//! singularities of the density at ρ = 0 or 1 (shape < 1) disappear under
//! this change of variables, and very peaked posteriors are located before
//! any nodes are placed.

use std::sync::OnceLock;

use super::gamma::ln_beta_unchecked;
use super::SpecFunError;

/// Order of the Gauss–Legendre rule used on each panel.
pub const PANEL_ORDER: usize = 16;

/// Log-integrand drop (relative to its peak) at which the window is cut.
const WINDOW_DROP: f64 = 46.0;
const MAX_DEPTH: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    /// Nodes in the initial pass, split into panels of [`PANEL_ORDER`] nodes.
    /// Panels that fail the error check are bisected.
    pub node_count: usize,
    pub rel_tol: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { node_count: 256, rel_tol: 1e-12 }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<(), SpecFunError> {
        if self.node_count < PANEL_ORDER {
            return Err(SpecFunError::InvalidSpec(format!(
                "quadrature needs at least {PANEL_ORDER} nodes, got {}",
                self.node_count
            )));
        }
        if !(self.rel_tol > 0.0) {
            return Err(SpecFunError::InvalidSpec("quadrature tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn panel_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(PANEL_ORDER))
}

/// `ln σ(t)` and `ln σ(-t)` without overflow.
#[inline]
pub(crate) fn ln_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// `(ρ, 1 - ρ)` at logit `t`, each computed without cancellation.
#[inline]
pub(crate) fn split_logit(t: f64) -> (f64, f64) {
    if t >= 0.0 {
        let e = (-t).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = t.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

/// Locates the peak of a unimodal log-integrand and a window around it
/// outside which it has dropped by [`WINDOW_DROP`].
fn find_window(h: &impl Fn(f64) -> f64, guess: f64) -> Result<(f64, f64, f64), SpecFunError> {
    let h0 = h(guess);
    if !h0.is_finite() {
        return Err(SpecFunError::InvalidIntegrand);
    }
    // bracket the maximum
    let (mut lo, mut mid, mut hi);
    let mut step = 0.5;
    if h(guess + step) > h0 {
        lo = guess;
        mid = guess + step;
        let mut hm = h(mid);
        loop {
            step *= 2.0;
            let next = mid + step;
            let hn = h(next);
            if !(hn > hm) || step > 1e12 {
                hi = next;
                break;
            }
            lo = mid;
            mid = next;
            hm = hn;
        }
    } else if h(guess - step) > h0 {
        hi = guess;
        mid = guess - step;
        let mut hm = h(mid);
        loop {
            step *= 2.0;
            let next = mid - step;
            let hn = h(next);
            if !(hn > hm) || step > 1e12 {
                lo = next;
                break;
            }
            hi = mid;
            mid = next;
            hm = hn;
        }
    } else {
        lo = guess - step;
        mid = guess;
        hi = guess + step;
    }
    // golden-section refinement of the peak
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (h(x1), h(x2));
    for _ in 0..200 {
        if (hi - lo).abs() < 1e-9 * (1.0 + mid.abs()) {
            break;
        }
        if f1 > f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = h(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = h(x2);
        }
    }
    let peak = 0.5 * (lo + hi);
    let hmax = h(peak).max(f1).max(f2).max(h0);
    if !hmax.is_finite() {
        return Err(SpecFunError::InvalidIntegrand);
    }
    let edge = |dir: f64| {
        let mut step = 0.25;
        loop {
            let t = peak + dir * step;
            let v = h(t);
            if !(v > hmax - WINDOW_DROP) || step > 1e9 {
                return t;
            }
            step *= 2.0;
        }
    };
    let left = edge(-1.0);
    let right = edge(1.0);
    Ok((left, right, hmax))
}

fn gl_panel(g: &impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (nodes, weights) = panel_rule();
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        acc += w * g(mid + half * x);
    }
    acc * half
}

fn adaptive(g: &impl Fn(f64) -> f64, lo: f64, hi: f64, whole: f64, tol: f64, depth: usize) -> f64 {
    let mid = 0.5 * (lo + hi);
    let left = gl_panel(g, lo, mid);
    let right = gl_panel(g, mid, hi);
    let split = left + right;
    if (split - whole).abs() <= tol || depth >= MAX_DEPTH {
        return split;
    }
    adaptive(g, lo, mid, left, 0.5 * tol, depth + 1) + adaptive(g, mid, hi, right, 0.5 * tol, depth + 1)
}

/// ∫ g over [lo, hi]: a uniform first pass, then bisection of failing panels.
fn integrate(g: &impl Fn(f64) -> f64, lo: f64, hi: f64, spec: &QuadratureSpec) -> f64 {
    let panels = (spec.node_count / PANEL_ORDER).max(1);
    let width = (hi - lo) / panels as f64;
    let first: Vec<f64> =
        (0..panels).map(|k| gl_panel(g, lo + k as f64 * width, lo + (k + 1) as f64 * width)).collect();
    let scale: f64 = first.iter().map(|v| v.abs()).sum();
    let tol = spec.rel_tol * scale.max(f64::MIN_POSITIVE) / panels as f64;
    first
        .iter()
        .enumerate()
        .map(|(k, &whole)| adaptive(g, lo + k as f64 * width, lo + (k + 1) as f64 * width, whole, tol, 0))
        .sum()
}

fn check_shapes(a: f64, b: f64) -> Result<(), SpecFunError> {
    for v in [a, b] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(SpecFunError::Domain { function: "beta law", value: v });
        }
    }
    Ok(())
}

/// `E[f(ρ, 1 - ρ)]` for ρ ~ Beta(a, b) in shape form.
pub fn beta_expectation(
    a: f64,
    b: f64,
    f: impl Fn(f64, f64) -> f64,
    spec: &QuadratureSpec,
) -> Result<f64, SpecFunError> {
    check_shapes(a, b)?;
    spec.validate()?;
    let norm = ln_beta_unchecked(a, b);
    let h = |t: f64| a * ln_sigmoid(t) + b * ln_sigmoid(-t);
    let (lo, hi, hmax) = find_window(&h, (a / b).ln())?;
    let g = |t: f64| {
        let (p, q) = split_logit(t);
        (h(t) - hmax).exp() * f(p, q)
    };
    let value = integrate(&g, lo, hi, spec) * (hmax - norm).exp();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SpecFunError::InvalidIntegrand)
    }
}

/// `ln E[exp(ln_f(ρ, 1 - ρ))]` for ρ ~ Beta(a, b); stays finite when the
/// expectation itself would overflow or underflow.
pub fn beta_ln_expectation_exp(
    a: f64,
    b: f64,
    ln_f: impl Fn(f64, f64) -> f64,
    spec: &QuadratureSpec,
) -> Result<f64, SpecFunError> {
    check_shapes(a, b)?;
    spec.validate()?;
    let norm = ln_beta_unchecked(a, b);
    let h = |t: f64| {
        let (p, q) = split_logit(t);
        a * ln_sigmoid(t) + b * ln_sigmoid(-t) + ln_f(p, q)
    };
    let (lo, hi, hmax) = find_window(&h, (a / b).ln())?;
    let g = |t: f64| (h(t) - hmax).exp();
    let value = integrate(&g, lo, hi, spec);
    if value > 0.0 && value.is_finite() {
        Ok(value.ln() + hmax - norm)
    } else {
        Err(SpecFunError::InvalidIntegrand)
    }
}

/// `∫_lo^hi g(t) dt` with the same adaptive panel scheme, for smooth `g`.
pub fn integrate_interval(
    g: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    spec: &QuadratureSpec,
) -> Result<f64, SpecFunError> {
    spec.validate()?;
    Ok(integrate(&g, lo, hi, spec))
}

/// For a unimodal log-density `h` on the real line, returns `ln ∫ e^h` and
/// the normalized moments `∫ e^h f_k / ∫ e^h`. `guess` should be near the mode.
pub fn log_density_moments(
    h: impl Fn(f64) -> f64,
    guess: f64,
    fs: &[&dyn Fn(f64) -> f64],
    spec: &QuadratureSpec,
) -> Result<(f64, Vec<f64>), SpecFunError> {
    spec.validate()?;
    let (lo, hi, hmax) = find_window(&h, guess)?;
    let mass = integrate(&|t: f64| (h(t) - hmax).exp(), lo, hi, spec);
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(SpecFunError::InvalidIntegrand);
    }
    let mut moments = Vec::with_capacity(fs.len());
    for f in fs {
        let v = integrate(&|t: f64| (h(t) - hmax).exp() * f(t), lo, hi, spec) / mass;
        if !v.is_finite() {
            return Err(SpecFunError::InvalidIntegrand);
        }
        moments.push(v);
    }
    Ok((mass.ln() + hmax, moments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let (x, w) = gauss_legendre(16);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        // ∫_{-1}^{1} t^30 dt = 2/31
        let m30: f64 = x.iter().zip(&w).map(|(t, w)| w * t.powi(30)).sum();
        assert!((m30 - 2.0 / 31.0).abs() < 1e-14);
        let (x5, w5) = gauss_legendre(5);
        let m8: f64 = x5.iter().zip(&w5).map(|(t, w)| w * t.powi(8)).sum();
        assert!((m8 - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn beta_moments() {
        let spec = QuadratureSpec::default();
        for &(a, b) in &[(0.05, 0.3), (0.5, 0.5), (2.0, 7.0), (1040.0, 960.0), (0.1, 45.0)] {
            let total = beta_expectation(a, b, |_, _| 1.0, &spec).unwrap();
            assert!((total - 1.0).abs() < 1e-11, "a={a} b={b} total={total}");
            let mean = beta_expectation(a, b, |p, _| p, &spec).unwrap();
            assert!((mean - a / (a + b)).abs() < 1e-11 * (a / (a + b)).max(1e-3), "a={a} b={b}");
            let var = beta_expectation(a, b, |p, _| (p - a / (a + b)).powi(2), &spec).unwrap();
            let want = a * b / ((a + b).powi(2) * (a + b + 1.0));
            assert!((var - want).abs() < 1e-10 * want, "a={a} b={b}");
        }
    }

    #[test]
    fn log_form_matches_direct_form() {
        let spec = QuadratureSpec::default();
        let (a, b) = (3.4, 1.7);
        let direct = beta_expectation(a, b, |p, _| (1.0 + 2.0 * p).powf(-3.0), &spec).unwrap();
        let logged = beta_ln_expectation_exp(a, b, |p, _| -3.0 * (2.0 * p).ln_1p(), &spec).unwrap();
        assert!((logged.exp() - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = QuadratureSpec::default();
        assert!(beta_expectation(0.0, 1.0, |_, _| 1.0, &spec).is_err());
        let tiny = QuadratureSpec { node_count: 8, ..spec };
        assert!(beta_expectation(1.0, 1.0, |_, _| 1.0, &tiny).is_err());
    }
}
