//! Log-gamma, digamma and related log-scale helpers.
//!
//! Both kernels shift the argument upward with the recurrence until the
//! asymptotic (Stirling / de Moivre) series is accurate to double precision,
//! which keeps them usable from tiny arguments up to ~1e300.

use super::SpecFunError;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this the recurrence is used to move into the asymptotic regime.
const ASYMPTOTIC_FROM: f64 = 10.0;

/// Tail of the Stirling series, `ln Γ(x) - [(x - ½) ln x - x + ½ ln 2π]`.
fn stirling_tail(x: f64) -> f64 {
    let r = 1.0 / x;
    let r2 = r * r;
    r * (1.0 / 12.0
        + r2 * (-1.0 / 360.0
            + r2 * (1.0 / 1260.0
                + r2 * (-1.0 / 1680.0 + r2 * (1.0 / 1188.0 + r2 * (-691.0 / 360_360.0 + r2 * (1.0 / 156.0)))))))
}

fn check_positive(x: f64, what: &'static str) -> Result<(), SpecFunError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(SpecFunError::Domain { function: what, value: x })
    }
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> Result<f64, SpecFunError> {
    check_positive(x, "ln_gamma")?;
    Ok(ln_gamma_unchecked(x))
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    if x >= ASYMPTOTIC_FROM {
        return (x - 0.5) * x.ln() - x + HALF_LN_2PI + stirling_tail(x);
    }
    // ln Γ(x) = ln Γ(x + n) - ln[x (x+1) ... (x+n-1)]
    let mut shifted = x;
    let mut prod = 1.0;
    while shifted < ASYMPTOTIC_FROM {
        prod *= shifted;
        shifted += 1.0;
    }
    (shifted - 0.5) * shifted.ln() - shifted + HALF_LN_2PI + stirling_tail(shifted) - prod.ln()
}

/// `ln B(a, b) = ln Γ(a) + ln Γ(b) - ln Γ(a + b)`.
///
/// When both arguments are large the Stirling pieces are combined before
/// subtraction so that the result keeps its relative accuracy.
pub fn ln_beta(a: f64, b: f64) -> Result<f64, SpecFunError> {
    check_positive(a, "ln_beta")?;
    check_positive(b, "ln_beta")?;
    Ok(ln_beta_unchecked(a, b))
}

pub(crate) fn ln_beta_unchecked(a: f64, b: f64) -> f64 {
    let (small, large) = if a < b { (a, b) } else { (b, a) };
    if small >= ASYMPTOTIC_FROM {
        let s = a + b;
        return HALF_LN_2PI + (a - 0.5) * (a / s).ln() + (b - 0.5) * (b / s).ln() - 0.5 * s.ln()
            + stirling_tail(a)
            + stirling_tail(b)
            - stirling_tail(s);
    }
    // ln Γ(large) - ln Γ(large + small) without the large cancellation
    ln_gamma_unchecked(small) - ln_poch_unchecked(large, small)
}

/// `ln[Γ(a + n) / Γ(a)]`, the log rising factorial, for `a > 0`, `n >= 0`.
pub fn ln_poch(a: f64, n: f64) -> Result<f64, SpecFunError> {
    check_positive(a, "ln_poch")?;
    if !(n >= 0.0) || !n.is_finite() {
        return Err(SpecFunError::Domain { function: "ln_poch", value: n });
    }
    Ok(ln_poch_unchecked(a, n))
}

pub(crate) fn ln_poch_unchecked(a: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    if n.fract() == 0.0 && n <= 16.0 {
        let mut acc = 0.0;
        let mut prod = 1.0;
        let mut k = 0.0;
        while k < n {
            prod *= a + k;
            if prod > 1e280 {
                acc += prod.ln();
                prod = 1.0;
            }
            k += 1.0;
        }
        return acc + prod.ln();
    }
    if a >= ASYMPTOTIC_FROM {
        let s = a + n;
        // (s - ½) ln s - (a - ½) ln a - n, rearranged to avoid cancellation
        return (a - 0.5) * (n / a).ln_1p() + n * s.ln() - n + stirling_tail(s) - stirling_tail(a);
    }
    // a small: shift a up with the recurrence, then use the stable form above
    let mut shifted = a;
    let mut prod = 1.0;
    while shifted < ASYMPTOTIC_FROM {
        prod *= shifted;
        shifted += 1.0;
    }
    let steps = shifted - a;
    if n >= steps {
        // Γ(a+n)/Γ(a) = Γ(shifted + (n - steps)) / Γ(shifted) * prod
        ln_poch_unchecked(shifted, n - steps) + prod.ln()
    } else {
        ln_gamma_unchecked(a + n) - ln_gamma_unchecked(a)
    }
}

/// Digamma function ψ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64, SpecFunError> {
    check_positive(x, "digamma")?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut shifted = x;
    let mut acc = 0.0;
    while shifted < ASYMPTOTIC_FROM {
        acc -= 1.0 / shifted;
        shifted += 1.0;
    }
    let r = 1.0 / shifted;
    let r2 = r * r;
    let tail = r2
        * (1.0 / 12.0
            - r2 * (1.0 / 120.0
                - r2 * (1.0 / 252.0
                    - r2 * (1.0 / 240.0 - r2 * (1.0 / 132.0 - r2 * (691.0 / 32_760.0 - r2 * (1.0 / 12.0)))))));
    acc + shifted.ln() - 0.5 * r - tail
}

/// Trigamma function ψ'(x) for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64, SpecFunError> {
    check_positive(x, "trigamma")?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut shifted = x;
    let mut acc = 0.0;
    while shifted < ASYMPTOTIC_FROM {
        acc += 1.0 / (shifted * shifted);
        shifted += 1.0;
    }
    let r = 1.0 / shifted;
    let r2 = r * r;
    let tail = r
        + 0.5 * r2
        + r * r2
            * (1.0 / 6.0
                - r2 * (1.0 / 30.0
                    - r2 * (1.0 / 42.0
                        - r2 * (1.0 / 30.0 - r2 * (5.0 / 66.0 - r2 * (691.0 / 2730.0 - r2 * (7.0 / 6.0)))))));
    acc + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    /// ψ(x) = -γ + Σ_{k≥0} [1/(k+1) - 1/(k+x)], summed to N with an
    /// integral estimate of the remaining tail.
    fn digamma_partial_sum(x: f64) -> f64 {
        let n = 200_000usize;
        let mut sum = 0.0;
        let mut comp = 0.0;
        for k in 0..n {
            let kf = k as f64;
            let t = 1.0 / (kf + 1.0) - 1.0 / (kf + x) - comp;
            let next = sum + t;
            comp = (next - sum) - t;
            sum = next;
        }
        let a = n as f64 - 0.5;
        let tail = ((a + x) / (a + 1.0)).ln();
        -EULER_GAMMA + sum + tail
    }

    #[test]
    fn digamma_at_one_is_minus_euler() {
        let v = digamma(1.0).unwrap();
        assert!((v + EULER_GAMMA).abs() < 1e-15, "{v}");
    }

    #[test]
    fn digamma_matches_partial_sum_reference() {
        for &x in &[0.05, 0.3, 1.0, 2.5, 7.25, 13.0, 120.0] {
            let got = digamma(x).unwrap();
            let want = digamma_partial_sum(x);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "x={x} got={got} want={want}");
        }
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.7, 3.2, 11.5] {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((d - 1.0 / x).abs() < 1e-13, "x={x}");
        }
    }

    #[test]
    fn domain_errors() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.0).is_err());
        assert!(ln_gamma(0.0).is_err());
        assert!(ln_beta(1.0, -2.0).is_err());
        assert!(digamma(f64::NAN).is_err());
    }

    #[test]
    fn ln_gamma_factorials() {
        assert!(ln_gamma(1.0).unwrap().abs() < 1e-15);
        assert!(ln_gamma(2.0).unwrap().abs() < 1e-15);
        assert!((ln_gamma(5.0).unwrap() - 24f64.ln()).abs() < 1e-14);
        let mut lf = 0.0;
        for k in 1..=170 {
            lf += (k as f64).ln();
            let got = ln_gamma(k as f64 + 1.0).unwrap();
            assert!((got - lf).abs() <= 1e-13 * lf.max(1.0), "k={k}");
        }
        // Γ(1/2) = √π
        let half = ln_gamma(0.5).unwrap();
        assert!((half - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-14);
    }

    #[test]
    fn ln_gamma_huge_arguments_stay_finite() {
        let v = ln_gamma(1e12).unwrap();
        let approx = (1e12 - 0.5) * (1e12f64).ln() - 1e12 + HALF_LN_2PI;
        assert!(v.is_finite());
        assert!((v - approx).abs() / approx < 1e-15);
        assert!(ln_beta(1e12, 3e11).unwrap().is_finite());
    }

    #[test]
    fn ln_beta_identity() {
        let (a, b) = (2.5, 7.1);
        let want = ln_gamma(a).unwrap() + ln_gamma(b).unwrap() - ln_gamma(a + b).unwrap();
        assert!((ln_beta(a, b).unwrap() - want).abs() < 1e-13);
        assert!(ln_beta(1.0, 1.0).unwrap().abs() < 1e-14);
        // large-argument branch vs direct subtraction at moderate size
        let (a, b) = (40.0, 75.5);
        let want = ln_gamma(a).unwrap() + ln_gamma(b).unwrap() - ln_gamma(a + b).unwrap();
        assert!((ln_beta(a, b).unwrap() - want).abs() < 1e-11);
    }

    #[test]
    fn ln_poch_matches_products() {
        for &a in &[0.01, 0.3, 1.0, 4.7, 25.0, 3e4, 1e12] {
            for n in [0u32, 1, 3, 17, 40, 250] {
                let mut direct = 0.0;
                for k in 0..n {
                    direct += (a + k as f64).ln();
                }
                let got = ln_poch(a, n as f64).unwrap();
                assert!((got - direct).abs() <= 1e-12 * direct.abs().max(1.0), "a={a} n={n} got={got} direct={direct}");
            }
        }
    }

    #[test]
    fn trigamma_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0).unwrap() - pi2_6).abs() < 1e-14);
        let d = trigamma(2.3).unwrap() - trigamma(3.3).unwrap();
        assert!((d - 1.0 / (2.3f64 * 2.3)).abs() < 1e-14);
    }
}
