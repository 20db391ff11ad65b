//! Dirichlet-multinomial model: probability mass, moment estimates, the
//! moment-based cross-group test and maximum likelihood fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize, BfgsConfig};
use crate::special::{digamma, ln_gamma, ChiSq};

/// Upper clamp for moment estimates of θ.
pub const THETA_MAX: f64 = 1.0 - 1e-8;
/// `ln ν` above which a fit is reported as sitting on the multinomial boundary.
pub const LOG_NU_BOUNDARY: f64 = 25.0;
/// Proportions below this mark a fit as sitting on the simplex boundary.
pub const PI_BOUNDARY: f64 = 1e-10;

/// Mean proportions π and dispersion ν; θ = 1/(1+ν).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmParams {
    pub pi: Vec<f64>,
    pub nu: f64,
}

impl DmParams {
    pub fn new(pi: Vec<f64>, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::Domain(format!("nu must be positive, got {nu}")));
        }
        if pi.len() < 2 || pi.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Domain("pi needs at least two nonnegative entries".into()));
        }
        let s: f64 = pi.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("pi must sum to 1, sums to {s}")));
        }
        Ok(Self { pi, nu })
    }

    pub fn theta(&self) -> f64 {
        1.0 / (1.0 + self.nu)
    }

    pub fn from_theta(pi: Vec<f64>, theta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&theta) {
            return Err(Error::Domain(format!("theta must lie in [0, 1), got {theta}")));
        }
        let nu = if theta == 0.0 { f64::INFINITY } else { 1.0 / theta - 1.0 };
        Self::new(pi, nu)
    }
}

/// ln Γ(a+n) − ln Γ(a) for a > 0.
pub(crate) fn ln_rising(a: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if n <= 16 {
        return (0..n).map(|m| (a + m as f64).ln()).sum();
    }
    let nf = n as f64;
    if a >= 20.0 {
        // Stirling difference; the leading terms are combined through ln_1p
        let b = a + nf;
        let lead = (a - 0.5) * (nf / a).ln_1p() + nf * b.ln() - nf;
        let corr = |x: f64| {
            let r = 1.0 / (x * x);
            (1.0 / 12.0 - r * (1.0 / 360.0 - r / 1260.0)) / x
        };
        return lead + corr(b) - corr(a);
    }
    ln_gamma(a + nf) - ln_gamma(a)
}

/// ψ(a+n) − ψ(a) for a > 0.
pub(crate) fn digamma_rising(a: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if n <= 16 {
        return (0..n).map(|m| 1.0 / (a + m as f64)).sum();
    }
    digamma(a + n as f64) - digamma(a)
}

fn ln_multinomial_coef(x: &[u64]) -> f64 {
    let n: u64 = x.iter().sum();
    ln_gamma(n as f64 + 1.0) - x.iter().map(|&v| ln_gamma(v as f64 + 1.0)).sum::<f64>()
}

/// Log probability of one count vector.
pub fn dm_log_pmf(params: &DmParams, x: &[u64]) -> Result<f64> {
    if x.len() != params.pi.len() {
        return Err(Error::DimensionMismatch { expected: params.pi.len(), found: x.len() });
    }
    if x.iter().all(|&v| v == 0) {
        return Ok(0.0);
    }
    Ok(ln_multinomial_coef(x) + dm_log_kernel(&params.pi, params.nu, x))
}

/// Log pmf without the multinomial coefficient.
fn dm_log_kernel(pi: &[f64], nu: f64, x: &[u64]) -> f64 {
    let n: u64 = x.iter().sum();
    if n == 0 {
        return 0.0;
    }
    if nu.is_infinite() {
        return x
            .iter()
            .zip(pi)
            .map(|(&c, &p)| if c == 0 { 0.0 } else { c as f64 * p.ln() })
            .sum();
    }
    let mut s = -ln_rising(nu, n);
    for (&c, &p) in x.iter().zip(pi) {
        if c > 0 {
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            s += ln_rising(nu * p, c);
        }
    }
    s
}

/// Log-likelihood of a set of samples.
pub fn dm_log_likelihood<R: AsRef<[u64]>>(params: &DmParams, rows: &[R]) -> Result<f64> {
    rows.iter().map(|r| dm_log_pmf(params, r.as_ref())).sum()
}

/// Moment estimates of π and θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomEstimate {
    pub pi: Vec<f64>,
    /// θ clamped to `[0, THETA_MAX]`.
    pub theta: f64,
    /// The unclamped moment ratio.
    pub raw_theta: f64,
    /// Samples with a positive total (others are ignored).
    pub n_used: usize,
}

/// Moment estimates from the rows with a positive total.
pub fn mom_estimate<R: AsRef<[u64]>>(rows: &[R]) -> Result<MomEstimate> {
    let rows: Vec<&[u64]> = rows.iter().map(AsRef::as_ref).filter(|r| r.iter().any(|&v| v > 0)).collect();
    let n = rows.len();
    let k = rows.first().map_or(0, |r| r.len());
    if n < 2 {
        return Err(Error::InsufficientData(format!("moment estimates need at least 2 samples with counts, got {n}")));
    }
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, found: rows.iter().map(|r| r.len()).find(|&l| l != k).unwrap_or(0) });
    }
    let totals: Vec<f64> = rows.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let grand: f64 = totals.iter().sum();
    let denom_g: f64 = totals.iter().map(|t| t - 1.0).sum();
    if denom_g <= 0.0 {
        return Err(Error::InsufficientData("every sample has a total of at most 1".into()));
    }
    let mut pi = vec![0.0; k];
    for r in &rows {
        for (p, &c) in pi.iter_mut().zip(r.iter()) {
            *p += c as f64;
        }
    }
    pi.iter_mut().for_each(|p| *p /= grand);
    let nf = n as f64;
    let n_c = (grand - totals.iter().map(|t| t * t).sum::<f64>() / grand) / (nf - 1.0);
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..k {
        let (mut s, mut g) = (0.0, 0.0);
        for (r, &t) in rows.iter().zip(&totals) {
            let p = r[j] as f64 / t;
            s += t * (p - pi[j]).powi(2);
            g += t * p * (1.0 - p);
        }
        s /= nf - 1.0;
        g /= denom_g;
        num += s - g;
        den += s + (n_c - 1.0) * g;
    }
    let raw_theta = if den > 0.0 { num / den } else { 0.0 };
    let theta = if raw_theta.is_finite() { raw_theta.clamp(0.0, THETA_MAX) } else { 0.0 };
    Ok(MomEstimate { pi, theta, raw_theta, n_used: n })
}

/// Output of the moment-based cross-group test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomTestResult {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
    pub group_pi: Vec<Vec<f64>>,
    pub group_theta: Vec<f64>,
    pub pooled_pi: Vec<f64>,
    pub weights: Vec<f64>,
    /// Categories with zero pooled proportion, left out of the statistic.
    pub dropped_categories: Vec<usize>,
}

/// Tests equality of mean proportions across groups.
pub fn mom_test<R: AsRef<[u64]>>(groups: &[&[R]]) -> Result<MomTestResult> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 groups, got {}", groups.len())));
    }
    let mut group_pi = Vec::with_capacity(groups.len());
    let mut group_theta = Vec::with_capacity(groups.len());
    let mut raw_weights = Vec::with_capacity(groups.len());
    let mut k = None;
    for rows in groups {
        let est = mom_estimate(rows)?;
        if *k.get_or_insert(est.pi.len()) != est.pi.len() {
            return Err(Error::DimensionMismatch { expected: k.unwrap_or(0), found: est.pi.len() });
        }
        let totals: Vec<f64> =
            rows.iter().map(|r| r.as_ref().iter().sum::<u64>() as f64).filter(|&t| t > 0.0).collect();
        let grand: f64 = totals.iter().sum();
        let sum_sq: f64 = totals.iter().map(|t| t * t).sum();
        let c = est.theta * (sum_sq - grand) + grand;
        raw_weights.push(grand * grand / c);
        group_pi.push(est.pi);
        group_theta.push(est.theta);
    }
    let k = k.unwrap_or(0);
    let wsum: f64 = raw_weights.iter().sum();
    let weights: Vec<f64> = raw_weights.iter().map(|w| w / wsum).collect();
    let mut pooled = vec![0.0; k];
    for (pi, w) in group_pi.iter().zip(&weights) {
        for (p, q) in pooled.iter_mut().zip(pi) {
            *p += w * q;
        }
    }
    let dropped: Vec<usize> = (0..k).filter(|&j| pooled[j] <= 0.0).collect();
    let k_eff = k - dropped.len();
    if k_eff < 2 {
        return Err(Error::Degenerate(format!("only {k_eff} category has nonzero pooled proportion")));
    }
    let mut t = 0.0;
    for (pi, w) in group_pi.iter().zip(&raw_weights) {
        let q: f64 = (0..k).filter(|&j| pooled[j] > 0.0).map(|j| (pi[j] - pooled[j]).powi(2) / pooled[j]).sum();
        t += w * q;
    }
    let df = ((k_eff - 1) * (groups.len() - 1)) as u32;
    let p_value = ChiSq::new(df)?.sf(t).clamp(0.0, 1.0);
    Ok(MomTestResult {
        statistic: t,
        df,
        p_value,
        group_pi,
        group_theta,
        pooled_pi: pooled,
        weights,
        dropped_categories: dropped,
    })
}

/// Maximum likelihood fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmFit {
    pub params: DmParams,
    pub log_likelihood: f64,
    pub converged: bool,
    /// The optimum lies at the edge of the parameter space (ν → ∞ or some π → 0).
    pub boundary: bool,
    pub iterations: usize,
}

/// Maximizes the likelihood over (ln ν, multinomial logits of π) by BFGS.
/// Categories with no counts are fixed at π = 0.  Without `init`, starts from
/// the moment estimates.
pub fn dm_mle<R: AsRef<[u64]>>(rows: &[R], init: Option<&DmParams>) -> Result<DmFit> {
    let rows: Vec<&[u64]> = rows.iter().map(AsRef::as_ref).collect();
    let k = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || k < 2 {
        return Err(Error::InsufficientData("maximum likelihood needs samples with at least 2 categories".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, found: r.len() });
    }
    let col_tot: Vec<u64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
    let active: Vec<usize> = (0..k).filter(|&j| col_tot[j] > 0).collect();
    let ln_coef: f64 = rows.iter().map(|r| ln_multinomial_coef(r)).sum();
    let expand = |pi_act: &[f64]| {
        let mut pi = vec![0.0; k];
        for (&j, &p) in active.iter().zip(pi_act) {
            pi[j] = p;
        }
        pi
    };
    if active.len() < 2 {
        // a single occupied category: the likelihood is 1 at π concentrated there
        let pi = expand(&vec![1.0; active.len()]);
        let params = DmParams { pi, nu: f64::INFINITY };
        let ll = dm_log_likelihood(&params, &rows)?;
        return Ok(DmFit { params, log_likelihood: ll, converged: true, boundary: true, iterations: 0 });
    }
    let data: Vec<Vec<u64>> = rows.iter().filter(|r| r.iter().any(|&v| v > 0)).map(|r| active.iter().map(|&j| r[j]).collect()).collect();
    let m = active.len();

    let (pi0, nu0) = match init {
        Some(p) => {
            if p.pi.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: p.pi.len() });
            }
            (active.iter().map(|&j| p.pi[j]).collect::<Vec<_>>(), p.nu)
        }
        None => match mom_estimate(&data) {
            Ok(est) => (est.pi, if est.theta > 0.0 { 1.0 / est.theta - 1.0 } else { 1e8 }),
            Err(_) => {
                let tot: f64 = active.iter().map(|&j| col_tot[j] as f64).sum();
                (active.iter().map(|&j| col_tot[j] as f64 / tot).collect(), 1e3)
            }
        },
    };
    let mut x0 = vec![0.0; m];
    x0[0] = nu0.clamp(1e-6, 1e12).ln();
    let last = pi0[m - 1].max(1e-8);
    for j in 0..m - 1 {
        x0[j + 1] = (pi0[j].max(1e-8) / last).ln();
    }
    let n_rows = data.len().max(1) as f64;
    let totals: Vec<u64> = data.iter().map(|r| r.iter().sum()).collect();
    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let nu = x[0].exp();
        let pi = softmax_with_reference(&x[1..]);
        let alpha: Vec<f64> = pi.iter().map(|p| nu * p).collect();
        if !(nu > 0.0 && nu.is_finite()) || alpha.iter().any(|a| !(*a > 0.0)) {
            return f64::INFINITY;
        }
        let mut ll = 0.0;
        let mut g = vec![0.0; m];
        for (r, &n) in data.iter().zip(&totals) {
            ll -= ln_rising(nu, n);
            let d_nu = digamma_rising(nu, n);
            for j in 0..m {
                ll += ln_rising(alpha[j], r[j]);
                g[j] += digamma_rising(alpha[j], r[j]) - d_nu;
            }
        }
        let s: f64 = alpha.iter().zip(&g).map(|(a, gj)| a * gj).sum();
        let pg: f64 = pi.iter().zip(&g).map(|(p, gj)| p * gj).sum();
        grad[0] = -s / n_rows;
        for j in 0..m - 1 {
            grad[j + 1] = -nu * pi[j] * (g[j] - pg) / n_rows;
        }
        -ll / n_rows
    };
    let res = minimize(objective, &x0, &BfgsConfig::default());
    let nu = res.x[0].exp();
    let pi_act = softmax_with_reference(&res.x[1..]);
    let boundary = res.x[0] > LOG_NU_BOUNDARY || pi_act.iter().any(|&p| p < PI_BOUNDARY);
    let params = DmParams { pi: expand(&pi_act), nu };
    let ll = -res.value * n_rows + ln_coef;
    Ok(DmFit { params, log_likelihood: ll, converged: res.converged, boundary, iterations: res.iterations })
}

/// Multinomial logit inverse with the last category as reference.
fn softmax_with_reference(eta: &[f64]) -> Vec<f64> {
    let mx = eta.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut pi: Vec<f64> = eta.iter().map(|&e| (e - mx).exp()).collect();
    pi.push((-mx).exp());
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    pi
}
