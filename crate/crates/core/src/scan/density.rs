//! Tabulated conditional distributions of node values given that no block
//! sum exceeds `w`.
//!
//! Tables are indexed by `u = sqrt(z / span)`, which turns the `z^{-1/2}`
//! behaviour of χ²₁ densities at zero into something smooth, and are
//! interpolated with monotone piecewise cubics.

use serde::{Deserialize, Serialize};

use super::engine::le1_df2_closed_form;
use crate::error::{Error, Result};
use crate::quadrature::{integrate_plain, QuadConfig};
use crate::special::{chi2_density, chi2_lower};

const TARGET_ERROR: f64 = 1e-8;
const CHECKS: usize = 48;

/// One tabulated distribution on `[0, span]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub span: f64,
    cdf: Vec<f64>,
    cdf_slope: Vec<f64>,
    /// dCDF/du at the grid points.
    du: Vec<f64>,
    du_slope: Vec<f64>,
}

impl Table {
    fn build(span: f64, n: usize, cdf: impl Fn(f64) -> f64, density: impl Fn(f64) -> f64) -> Self {
        let h = 1.0 / (n - 1) as f64;
        let mut c = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        for k in 0..n {
            let u = k as f64 * h;
            c.push(cdf(span * u * u).clamp(0.0, 1.0));
            // the u-density has a finite limit at zero even where the z-density does not
            let ud = u.max(1e-12);
            d.push(density(span * ud * ud) * 2.0 * span * ud);
        }
        for k in 1..n {
            // rounding can leave tiny decreases that break monotonicity
            if c[k] < c[k - 1] {
                c[k] = c[k - 1];
            }
        }
        let cdf_slope = pchip_slopes(&c, h);
        let du_slope = pchip_slopes(&d, h);
        Self { span, cdf: c, cdf_slope, du: d, du_slope }
    }

    pub fn grid_size(&self) -> usize {
        self.cdf.len()
    }

    pub fn cdf(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        if z >= self.span {
            return 1.0;
        }
        hermite(&self.cdf, &self.cdf_slope, (z / self.span).sqrt())
    }

    pub fn density(&self, z: f64) -> f64 {
        if z <= 0.0 || z > self.span {
            return 0.0;
        }
        let u = (z / self.span).sqrt();
        (hermite(&self.du, &self.du_slope, u) / (2.0 * self.span * u)).max(0.0)
    }
}

/// Fritsch–Carlson slopes on a uniform grid.
fn pchip_slopes(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let delta: Vec<f64> = y.windows(2).map(|p| (p[1] - p[0]) / h).collect();
    let mut m = vec![0.0; n];
    m[0] = delta[0];
    m[n - 1] = delta[n - 2];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        m[k] = if a * b <= 0.0 { 0.0 } else { 2.0 * a * b / (a + b) };
    }
    for k in 0..n - 1 {
        if delta[k] == 0.0 {
            m[k] = 0.0;
            m[k + 1] = 0.0;
        } else {
            let (a, b) = (m[k] / delta[k], m[k + 1] / delta[k]);
            let s = a * a + b * b;
            if s > 9.0 {
                let t = 3.0 / s.sqrt();
                m[k] = t * a * delta[k];
                m[k + 1] = t * b * delta[k];
            }
        }
    }
    m
}

fn hermite(y: &[f64], m: &[f64], u: f64) -> f64 {
    let n = y.len();
    let h = 1.0 / (n - 1) as f64;
    let k = ((u / h) as usize).min(n - 2);
    let t = (u - k as f64 * h) / h;
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * y[k]
        + (t3 - 2.0 * t2 + t) * h * m[k]
        + (-2.0 * t3 + 3.0 * t2) * y[k + 1]
        + (t3 - t2) * h * m[k + 1]
}

/// Conditional distributions given that every block sum stays at or below `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTables {
    pub w: f64,
    /// Marginal of one node, for blocks of size 1, 2, 3.
    pub marginal: Vec<Table>,
    /// Sum of two nodes of the same block, for block sizes 2 and 3.
    pub same_block_sum: Vec<Table>,
    /// Sum of two nodes from different blocks with sizes `(s1, s2)`, `s1 ≤ s2`.
    pub cross_block_sum: Vec<((usize, usize), Table)>,
    /// Largest CDF interpolation error seen at the spot checks.
    pub max_check_error: f64,
}

impl DensityTables {
    pub fn marginal(&self, block_size: usize) -> &Table {
        &self.marginal[block_size - 1]
    }

    pub fn same_block_sum(&self, block_size: usize) -> &Table {
        &self.same_block_sum[block_size - 2]
    }

    pub fn cross_block_sum(&self, s1: usize, s2: usize) -> &Table {
        let key = (s1.min(s2), s1.max(s2));
        &self.cross_block_sum.iter().find(|(k, _)| *k == key).expect("sizes 1 to 3").1
    }
}

fn quad_cfg() -> QuadConfig {
    QuadConfig { rel_tol: 1e-12, abs_tol: 1e-15, max_intervals: 400 }
}

/// Exact conditional marginal CDF of a node in a block of size `s`.
fn marginal_cdf(s: usize, w: f64, z: f64) -> f64 {
    let z = z.clamp(0.0, w);
    match s {
        1 => chi2_lower(1, z) / chi2_lower(1, w),
        2 => {
            integrate_plain(|u| chi2_density(1, u) * chi2_lower(1, w - u), 0.0, z, &[], &quad_cfg()).value
                / chi2_lower(2, w)
        }
        _ => {
            (chi2_lower(1, z) - (-w / 2.0).exp() * (2.0 * z / std::f64::consts::PI).sqrt()) / chi2_lower(3, w)
        }
    }
}

fn marginal_density(s: usize, w: f64, z: f64) -> f64 {
    if z <= 0.0 || z > w {
        return 0.0;
    }
    let rest = if s == 1 { 1.0 } else { chi2_lower(s as u32 - 1, w - z) };
    chi2_density(1, z) * rest / chi2_lower(s as u32, w)
}

fn same_block_cdf(s: usize, w: f64, y: f64) -> f64 {
    let y = y.clamp(0.0, w);
    if s == 2 {
        chi2_lower(2, y) / chi2_lower(2, w)
    } else {
        le1_df2_closed_form(w, 0.0, y) / chi2_lower(3, w)
    }
}

fn same_block_density(s: usize, w: f64, y: f64) -> f64 {
    if y <= 0.0 || y > w {
        return 0.0;
    }
    let rest = if s == 2 { 1.0 } else { chi2_lower(1, w - y) };
    chi2_density(2, y) * rest / chi2_lower(s as u32, w)
}

/// CDF of the sum of independent nodes from blocks of sizes `s1`, `s2`, with
/// the second marginal CDF supplied.
fn cross_cdf(s1: usize, w: f64, x: f64, g2: &dyn Fn(f64) -> f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 2.0 * w {
        return 1.0;
    }
    integrate_plain(|y| marginal_density(s1, w, y) * g2((x - y).min(w)), 0.0, x.min(w), &[x - w], &quad_cfg()).value
}

fn cross_density(s1: usize, s2: usize, w: f64, x: f64) -> f64 {
    let (a, b) = ((x - w).max(0.0), x.min(w));
    if b <= a {
        return 0.0;
    }
    integrate_plain(|y| marginal_density(s1, w, y) * marginal_density(s2, w, x - y), a, b, &[], &quad_cfg()).value
}

/// Builds the tables on a grid of `grid_size` points, doubling the grid until
/// the CDF spot checks agree with direct quadrature to 1e-8.
pub fn conditional_density_tables(w: f64, grid_size: usize) -> Result<DensityTables> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::Domain(format!("w must be positive and finite, got {w}")));
    }
    if grid_size < 1024 {
        return Err(Error::InvalidConfig(format!("grid size must be at least 1024, got {grid_size}")));
    }
    let mut n = grid_size;
    loop {
        let tables = build_tables(w, n);
        if tables.max_check_error <= TARGET_ERROR || n >= 16 * grid_size {
            return Ok(tables);
        }
        n = 2 * n - 1;
    }
}

fn build_tables(w: f64, n: usize) -> DensityTables {
    let marginal: Vec<Table> =
        (1..=3).map(|s| Table::build(w, n, |z| marginal_cdf(s, w, z), |z| marginal_density(s, w, z))).collect();
    let same_block_sum: Vec<Table> =
        (2..=3).map(|s| Table::build(w, n, |y| same_block_cdf(s, w, y), |y| same_block_density(s, w, y))).collect();
    let mut cross_block_sum = Vec::new();
    for s1 in 1..=3 {
        for s2 in s1..=3 {
            let g2 = |z: f64| marginal[s2 - 1].cdf(z);
            let t = Table::build(2.0 * w, n, |x| cross_cdf(s1, w, x, &g2), |x| cross_density(s1, s2, w, x));
            cross_block_sum.push(((s1, s2), t));
        }
    }
    let mut max_err: f64 = 0.0;
    for k in 0..CHECKS {
        // deterministic low-discrepancy check points
        let u = (0.5 + k as f64 * 0.618_033_988_749_894_9).fract();
        let z = w * u * u;
        for s in 1..=3 {
            max_err = max_err.max((marginal[s - 1].cdf(z) - marginal_cdf(s, w, z)).abs());
        }
        for s in 2..=3 {
            max_err = max_err.max((same_block_sum[s - 2].cdf(z) - same_block_cdf(s, w, z)).abs());
        }
        if k % 4 == 0 {
            let x = 2.0 * z;
            for ((s1, s2), t) in &cross_block_sum {
                let exact = cross_cdf(*s1, w, x, &|v| marginal_cdf(*s2, w, v));
                max_err = max_err.max((t.cdf(x) - exact).abs());
            }
        }
    }
    DensityTables { w, marginal, same_block_sum, cross_block_sum, max_check_error: max_err }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    #[test]
    fn tables_are_normalized_and_accurate() {
        let w = 12.0;
        let t = conditional_density_tables(w, 1024).unwrap();
        assert!(t.max_check_error <= 1e-8, "{}", t.max_check_error);
        for s in 1..=3 {
            let m = t.marginal(s);
            let mass = integrate_plain(|z| m.density(z), 0.0, w, &[], &quad_cfg()).value;
            assert!((mass - 1.0).abs() < 1e-6, "size {s}: {mass}");
            assert!((m.cdf(w) - 1.0).abs() < 1e-12);
        }
        assert!((t.same_block_sum(2).cdf(w) - 1.0).abs() < 1e-12);
        assert!((t.same_block_sum(3).cdf(w) - 1.0).abs() < 1e-12);
        let c = t.cross_block_sum(3, 1);
        assert!((c.cdf(2.0 * w) - 1.0).abs() < 1e-12);
        assert!(grid_check(&t));
    }

    fn grid_check(t: &DensityTables) -> bool {
        (1..200).all(|k| {
            let z = t.w * k as f64 / 200.0;
            t.marginal(2).cdf(z) <= t.marginal(2).cdf(z + 1e-3)
        })
    }

    #[test]
    fn three_block_marginal_matches_rejection_sampling() {
        let w = 6.0;
        let t = conditional_density_tables(w, 1024).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let mut xs = Vec::new();
        while xs.len() < 200_000 {
            let z: [f64; 3] = std::array::from_fn(|_| {
                let x: f64 = rng.sample(StandardNormal);
                x * x
            });
            if z.iter().sum::<f64>() <= w {
                xs.push(z[0]);
            }
        }
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let sup = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = t.marginal(3).cdf(x);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(sup < 0.01, "{sup}");
    }

    #[test]
    fn small_grid_is_rejected() {
        assert!(conditional_density_tables(10.0, 100).is_err());
    }
}
