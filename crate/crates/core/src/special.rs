//! Gamma-family special functions and the chi-square distribution.
//!
//! The regularized incomplete gamma function is evaluated with the power
//! series below `x < a + 1` and with a Lentz continued fraction above it.
//! Degrees of freedom 1, 2 and 3 have closed forms in terms of `erf` and
//! `exp`; those paths are used for speed because the scan-bound integrands
//! evaluate them millions of times.

use std::f64::consts::{E, LN_2, PI};

use crate::error::{Error, Result};

const LANCZOS_R: f64 = 10.900511;
const LANCZOS_DK: [f64; 11] = [
    2.48574089138753565546e-5,
    1.05142378581721974210,
    -3.45687097222016235469,
    4.51227709466894823700,
    -2.98285225323576655721,
    1.05639711577126713077,
    -1.95428773191645869583e-1,
    1.70970543404441224307e-2,
    -5.71926117404305781283e-4,
    4.63399473359905636708e-6,
    -2.71994908488607703910e-9,
];
/// ln(2 * sqrt(e / pi))
const LN_2_SQRT_E_OVER_PI: f64 = 0.620_782_237_635_245_2;
const LN_PI: f64 = 1.144_729_885_849_400_2;
const MAX_ITER: usize = 2000;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Below this survival value, probabilities are carried as logarithms.
pub const LOG_SCALE_FLOOR: f64 = 1e-300;

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(ln_gamma(x))
}

/// Unchecked `ln Γ(x)`; callers guarantee `x > 0`.
#[inline]
pub(crate) fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection keeps the Lanczos sum in its accurate range
        let s = LANCZOS_DK
            .iter()
            .enumerate()
            .skip(1)
            .fold(LANCZOS_DK[0], |s, (i, d)| s + d / (i as f64 - x));
        LN_PI
            - (PI * x).sin().ln()
            - s.ln()
            - LN_2_SQRT_E_OVER_PI
            - (0.5 - x) * ((0.5 - x + LANCZOS_R) / E).ln()
    } else {
        let s = LANCZOS_DK
            .iter()
            .enumerate()
            .skip(1)
            .fold(LANCZOS_DK[0], |s, (i, d)| s + d / (x + i as f64 - 1.0));
        s.ln() + LN_2_SQRT_E_OVER_PI + (x - 0.5) * ((x - 0.5 + LANCZOS_R) / E).ln()
    }
}

/// Digamma function ψ(x) for `x > 0`.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut result = 0.0;
    let mut z = x;
    while z < 12.0 {
        result -= 1.0 / z;
        z += 1.0;
    }
    let mut r = 1.0 / z;
    result += z.ln() - 0.5 * r;
    r *= r;
    result
        - r * (1.0 / 12.0
            - r * (1.0 / 120.0 - r * (1.0 / 252.0 - r * (1.0 / 240.0 - r * (1.0 / 132.0)))))
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    gamma_pq(a, x).0
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    gamma_pq(a, x).1
}

fn gamma_pq(a: f64, x: f64) -> (f64, f64) {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return (0.0, 1.0);
    }
    if x.is_infinite() {
        return (1.0, 0.0);
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let p = (log_prefactor + series_sum(a, x).ln()).exp();
        (p, 1.0 - p)
    } else {
        let q = (log_prefactor + continued_fraction(a, x).ln()).exp();
        (1.0 - q, q)
    }
}

/// `ln Q(a, x)`, accurate even when Q underflows.
pub fn ln_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        let p = gamma_p(a, x);
        (-p).ln_1p()
    } else {
        a * x.ln() - x - ln_gamma(a) + continued_fraction(a, x).ln()
    }
}

/// Σ x^n / (a (a+1) ... (a+n)), the series for γ(a,x) e^x x^-a.
fn series_sum(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum
}

/// Modified Lentz evaluation of the continued fraction for Γ(a,x) e^x x^-a.
fn continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Chi-square distribution with a positive integer number of degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChiSq {
    df: u32,
}

impl ChiSq {
    pub fn new(df: u32) -> Result<Self> {
        if df == 0 {
            return Err(Error::Domain("chi-square needs df >= 1".into()));
        }
        Ok(Self { df })
    }

    pub fn df(&self) -> u32 {
        self.df
    }

    /// Density; `+inf` at `x = 0` for one degree of freedom.
    pub fn pdf(&self, x: f64) -> f64 {
        chi2_density(self.df, x)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return f64::NEG_INFINITY;
        }
        let k = 0.5 * self.df as f64;
        (k - 1.0) * x.ln() - 0.5 * x - k * LN_2 - ln_gamma(k)
    }

    /// CDF; zero for negative arguments.
    pub fn cdf(&self, x: f64) -> f64 {
        chi2_lower(self.df, x)
    }

    /// Survival function 1 - F(x).
    pub fn sf(&self, x: f64) -> f64 {
        chi2_upper(self.df, x)
    }

    /// `ln(1 - F(x))` with a log-scale path once the survival underflows.
    pub fn ln_sf(&self, x: f64) -> f64 {
        let s = self.sf(x);
        if s > LOG_SCALE_FLOOR {
            s.ln()
        } else {
            ln_gamma_q(0.5 * self.df as f64, 0.5 * x)
        }
    }

    /// Inverse CDF for `p` in `[0, 1)`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("quantile needs 0 <= p < 1, got {p}")));
        }
        if p == 0.0 {
            return Ok(0.0);
        }
        if p > 0.5 {
            return Ok(self.solve_upper((1.0 - p).ln()));
        }
        Ok(self.solve_lower(p.ln()))
    }

    /// Inverse survival function: the `x` with `1 - F(x) = q`, `q` in `(0, 1]`.
    pub fn isf(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Domain(format!("isf needs 0 < q <= 1, got {q}")));
        }
        self.isf_ln(q.ln())
    }

    /// Inverse survival function addressed by `ln q`, for tails below 1e-300.
    pub fn isf_ln(&self, ln_q: f64) -> Result<f64> {
        if !(ln_q <= 0.0) {
            return Err(Error::Domain(format!("isf_ln needs ln q <= 0, got {ln_q}")));
        }
        if ln_q == 0.0 {
            return Ok(0.0);
        }
        if ln_q > -LN_2 {
            // lower half: the CDF equation is better conditioned
            return Ok(self.solve_lower((-ln_q.exp_m1()).ln()));
        }
        Ok(self.solve_upper(ln_q))
    }

    /// Solves ln F(x) = target by safeguarded Newton steps.
    fn solve_lower(&self, target: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, self.bracket_hi(|x| self.cdf(x).ln() < target));
        let mut x = 0.5 * (lo + hi);
        for _ in 0..400 {
            let f = self.cdf(x);
            let g = f.ln() - target;
            if g == 0.0 {
                return x;
            }
            if g < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let slope = self.pdf(x) / f;
            let mut next = x - g / slope;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
                return next;
            }
            x = next;
        }
        x
    }

    /// Solves ln(1 - F(x)) = target.
    fn solve_upper(&self, target: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, self.bracket_hi(|x| self.ln_sf(x) > target));
        let mut x = 0.5 * (lo + hi);
        for _ in 0..400 {
            let ln_s = self.ln_sf(x);
            let g = ln_s - target;
            if g == 0.0 {
                return x;
            }
            if g > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            // d/dx ln S = -pdf / S, computed in log space
            let slope = -(self.ln_pdf(x) - ln_s).exp();
            let mut next = x - g / slope;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
                return next;
            }
            x = next;
        }
        x
    }

    fn bracket_hi(&self, below: impl Fn(f64) -> bool) -> f64 {
        let mut hi = (self.df as f64).max(1.0);
        while below(hi) {
            hi *= 2.0;
        }
        hi
    }
}

/// χ² density of `df` degrees of freedom at `x`.
#[inline]
pub(crate) fn chi2_density(df: u32, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    match df {
        1 => {
            if x == 0.0 {
                f64::INFINITY
            } else {
                (-0.5 * x).exp() / (2.0 * PI * x).sqrt()
            }
        }
        2 => 0.5 * (-0.5 * x).exp(),
        3 => (x / (2.0 * PI)).sqrt() * (-0.5 * x).exp(),
        _ => {
            if x == 0.0 {
                return 0.0;
            }
            let k = 0.5 * df as f64;
            ((k - 1.0) * x.ln() - 0.5 * x - k * LN_2 - ln_gamma(k)).exp()
        }
    }
}

/// χ² CDF; zero for `x <= 0`.
#[inline]
pub(crate) fn chi2_lower(df: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    match df {
        1 => libm::erf((0.5 * x).sqrt()),
        2 => -(-0.5 * x).exp_m1(),
        3 => {
            if x < 0.5 {
                gamma_p(1.5, 0.5 * x)
            } else {
                libm::erf((0.5 * x).sqrt()) - (2.0 * x / PI).sqrt() * (-0.5 * x).exp()
            }
        }
        _ => gamma_p(0.5 * df as f64, 0.5 * x),
    }
}

/// χ² survival function; one for `x <= 0`.
#[inline]
pub(crate) fn chi2_upper(df: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    match df {
        1 => libm::erfc((0.5 * x).sqrt()),
        2 => (-0.5 * x).exp(),
        3 => libm::erfc((0.5 * x).sqrt()) + (2.0 * x / PI).sqrt() * (-0.5 * x).exp(),
        _ => gamma_q(0.5 * df as f64, 0.5 * x),
    }
}

/// Checked χ² density; `x` must be nonnegative.
pub fn chi2_pdf(dist: ChiSq, x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("chi2_pdf needs x >= 0, got {x}")));
    }
    Ok(dist.pdf(x))
}

/// Checked χ² CDF; `x` must be nonnegative.
pub fn chi2_cdf(dist: ChiSq, x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("chi2_cdf needs x >= 0, got {x}")));
    }
    Ok(dist.cdf(x))
}

pub fn chi2_quantile(dist: ChiSq, p: f64) -> Result<f64> {
    dist.quantile(p)
}
