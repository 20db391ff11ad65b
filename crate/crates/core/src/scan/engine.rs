//! Exact-rule integration of probabilities over independent χ² variables
//! restricted by sum constraints.
//!
//! A [`Problem`] holds variables `Z_v ~ χ²(df_v)` and factors of the form
//! `F_r(b − Σ_{v∈mask} Z_v)` (side `Le`) or `1 − F_r(b − Σ Z_v)` (side `Gt`),
//! where `r = 0` stands for the hard indicators `Σ ≤ b` and `Σ > b`.  Its value
//! is `E[Π factors]`.  A block-conditioned triplet probability becomes such a
//! problem once the nodes outside the triplets are integrated out: each block
//! contributes a `Le` factor whose `r` counts its members outside.
//!
//! Before integrating, the problem is reduced exactly:
//! - constant and implied factors are dropped, contradictory ones give 0;
//! - a variable in a single factor is integrated analytically into it
//!   (`∫ f_k(z) F_r(c − z) dz = F_{r+k}(c)`, likewise for `Gt`);
//! - variables in the same set of factors are merged (their sum is χ²);
//! - disconnected parts are solved separately and multiplied.
//!
//! What remains is integrated one pivot variable at a time with adaptive
//! Gauss–Kronrod, down to one-variable leaves that use closed forms where
//! they exist.

use crate::quadrature::{integrate, QuadConfig};
use crate::special::{chi2_density, chi2_lower, chi2_upper, ln_gamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Side {
    Le,
    Gt,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Factor {
    pub mask: u32,
    pub bound: f64,
    pub r: u32,
    pub side: Side,
}

impl Factor {
    pub fn le(mask: u32, bound: f64, r: u32) -> Self {
        Self { mask, bound, r, side: Side::Le }
    }

    pub fn gt(mask: u32, bound: f64) -> Self {
        Self { mask, bound, r: 0, side: Side::Gt }
    }

    #[inline]
    fn eval(&self, s: f64) -> f64 {
        let x = self.bound - s;
        match (self.side, self.r) {
            (Side::Le, 0) => (x >= 0.0) as u8 as f64,
            (Side::Le, r) => chi2_lower(r, x),
            (Side::Gt, 0) => (x < 0.0) as u8 as f64,
            (Side::Gt, r) => chi2_upper(r, x),
        }
    }

    fn same_as(&self, o: &Factor) -> bool {
        self.mask == o.mask && self.bound == o.bound && self.r == o.r && self.side == o.side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Problem {
    /// Degrees of freedom per variable; 0 marks a removed variable.
    pub df: Vec<u32>,
    pub factors: Vec<Factor>,
}

/// Tolerances for the nested integrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Relative tolerance of the outermost integral.
    pub rel_tol: f64,
    /// Relative tolerance of nested integrals.
    pub inner_rel_tol: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-7, inner_rel_tol: 1e-9, abs_tol: 1e-18, max_intervals: 300 }
    }
}

impl EngineConfig {
    /// Tolerances a hundredfold looser.
    pub fn loosened(&self) -> Self {
        Self { rel_tol: self.rel_tol * 100.0, inner_rel_tol: self.inner_rel_tol * 100.0, ..*self }
    }
}

/// Value and absolute error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Value {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
}

impl Value {
    fn exact(v: f64) -> Self {
        Self { value: v, error: 0.0, converged: true }
    }

    fn times(self, o: Value) -> Value {
        Value {
            value: self.value * o.value,
            error: self.error * o.value.abs() + o.error * self.value.abs() + self.error * o.error,
            converged: self.converged && o.converged,
        }
    }

    fn scale(self, c: f64) -> Value {
        Value { value: self.value * c, error: self.error * c.abs(), converged: self.converged }
    }
}

/// Relabels the variables into a canonical order.  Returns the relabeled
/// problem and a key that identifies it up to variable relabeling.
pub(crate) fn canonical_form(p: &Problem) -> (Problem, Vec<u64>) {
    let (order, key) = canonical_order(p);
    let mut pos = [0u32; 32];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k as u32;
    }
    let remap = |mask: u32| (0..32).filter(|&v| mask >> v & 1 == 1).fold(0u32, |m, v| m | 1 << pos[v]);
    let mut factors: Vec<Factor> = p.factors.iter().map(|f| Factor { mask: remap(f.mask), ..*f }).collect();
    factors.sort_by(|a, b| {
        ((a.side as u8, a.r, a.mask), a.bound.to_bits()).cmp(&((b.side as u8, b.r, b.mask), b.bound.to_bits()))
    });
    let df = order.iter().map(|&v| p.df[v]).collect();
    (Problem { df, factors }, key)
}

fn canonical_order(p: &Problem) -> (Vec<usize>, Vec<u64>) {
    let vars: Vec<usize> = (0..p.df.len()).filter(|&v| p.df[v] > 0).collect();
    let encode = |order: &[usize]| -> Vec<u64> {
        let mut pos = [0u32; 32];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k as u32;
        }
        let mut fs: Vec<(u64, u64)> = p
            .factors
            .iter()
            .map(|f| {
                let m = (0..32).filter(|&v| f.mask >> v & 1 == 1).fold(0u64, |m, v| m | 1 << pos[v]);
                ((f.side as u64) << 63 | (f.r as u64) << 40 | m, f.bound.to_bits())
            })
            .collect();
        fs.sort_unstable();
        let mut key: Vec<u64> = order.iter().map(|&v| p.df[v] as u64).collect();
        key.extend(fs.into_iter().flat_map(|(a, b)| [a, b]));
        key
    };
    let mut order = vars.clone();
    let mut best = encode(&order);
    let mut best_order = order.clone();
    if vars.len() > 7 {
        return (best_order, best);
    }
    // Heap's algorithm over all labelings
    let n = order.len();
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            let k = encode(&order);
            if k < best {
                best = k;
                best_order.clone_from(&order);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best_order, best)
}

pub(crate) fn solve(p: Problem, cfg: &EngineConfig) -> Value {
    solve_at(p, cfg, 0)
}

fn solve_at(mut p: Problem, cfg: &EngineConfig, depth: usize) -> Value {
    let scale = match simplify(&mut p) {
        Some(s) => s,
        None => return Value::exact(0.0),
    };
    let comps = components(&p);
    if comps.is_empty() {
        return Value::exact(scale);
    }
    let mut out = Value::exact(scale);
    for (vars, factors) in comps {
        let sub = Problem { df: p.df.iter().enumerate().map(|(v, &d)| if vars >> v & 1 == 1 { d } else { 0 }).collect(), factors };
        let val = if vars.count_ones() == 1 { leaf(&sub, vars.trailing_zeros() as usize, cfg) } else { pivot(sub, cfg, depth) };
        out = out.times(val);
        if out.value == 0.0 {
            return Value::exact(0.0);
        }
    }
    out
}

/// Exact reductions.  Returns the constant multiplier, or `None` when the
/// problem's value is zero.
fn simplify(p: &mut Problem) -> Option<f64> {
    let mut scale = 1.0;
    loop {
        let mut changed = false;
        let mut i = 0;
        while i < p.factors.len() {
            if p.factors[i].mask == 0 {
                scale *= p.factors[i].eval(0.0);
                p.factors.swap_remove(i);
                changed = true;
            } else {
                i += 1;
            }
        }
        if scale == 0.0 {
            return None;
        }
        let n = p.factors.len();
        let mut drop = vec![false; n];
        for i in 0..n {
            let fi = p.factors[i];
            if fi.r != 0 {
                continue;
            }
            for j in 0..n {
                if i == j || drop[j] {
                    continue;
                }
                let fj = p.factors[j];
                let dup = fi.same_as(&fj) && j < i;
                match (fi.side, fj.side) {
                    (Side::Le, Side::Le) => {
                        let implied = fj.mask & fi.mask == fi.mask && fj.bound <= fi.bound;
                        if implied && (dup || !fi.same_as(&fj)) {
                            drop[i] = true;
                            break;
                        }
                    }
                    (Side::Gt, Side::Gt) if fj.r == 0 => {
                        let implied = fj.mask & fi.mask == fj.mask && fj.bound >= fi.bound;
                        if implied && (dup || !fi.same_as(&fj)) {
                            drop[i] = true;
                            break;
                        }
                    }
                    (Side::Gt, Side::Le) => {
                        if fj.mask & fi.mask == fi.mask && fj.bound <= fi.bound {
                            return None;
                        }
                    }
                    _ => {}
                }
            }
        }
        if drop.iter().any(|&d| d) {
            let mut k = 0;
            p.factors.retain(|_| {
                k += 1;
                !drop[k - 1]
            });
            changed = true;
        }
        for v in 0..p.df.len() {
            if p.df[v] == 0 {
                continue;
            }
            let bit = 1u32 << v;
            let mut count = 0;
            let mut last = 0;
            for (i, f) in p.factors.iter().enumerate() {
                if f.mask & bit != 0 {
                    count += 1;
                    last = i;
                }
            }
            match count {
                0 => {
                    p.df[v] = 0;
                    changed = true;
                }
                1 => {
                    let f = &mut p.factors[last];
                    f.r += p.df[v];
                    f.mask &= !bit;
                    p.df[v] = 0;
                    changed = true;
                }
                _ => {}
            }
        }
        let sigs: Vec<u64> = (0..p.df.len()).map(|v| signature(p, v)).collect();
        for v in 0..p.df.len() {
            if p.df[v] == 0 {
                continue;
            }
            for u in v + 1..p.df.len() {
                if p.df[u] != 0 && sigs[u] == sigs[v] {
                    p.df[v] += p.df[u];
                    p.df[u] = 0;
                    let bit = 1u32 << u;
                    for f in &mut p.factors {
                        f.mask &= !bit;
                    }
                    changed = true;
                }
            }
        }
        if !changed {
            return Some(scale);
        }
    }
}

fn signature(p: &Problem, v: usize) -> u64 {
    let bit = 1u32 << v;
    p.factors.iter().enumerate().fold(0u64, |s, (i, f)| if f.mask & bit != 0 { s | 1 << i } else { s })
}

/// Connected components as (variable mask, factors).
fn components(p: &Problem) -> Vec<(u32, Vec<Factor>)> {
    let alive: u32 = p.df.iter().enumerate().fold(0, |m, (v, &d)| if d > 0 { m | 1 << v } else { m });
    let mut left = alive;
    let mut out = Vec::new();
    while left != 0 {
        let mut comp = 1u32 << left.trailing_zeros();
        loop {
            let grown = p.factors.iter().filter(|f| f.mask & comp != 0).fold(comp, |c, f| c | f.mask);
            if grown == comp {
                break;
            }
            comp = grown;
        }
        left &= !comp;
        out.push((comp, p.factors.iter().filter(|f| f.mask & comp != 0).copied().collect()));
    }
    out
}

fn component_count(p: &Problem, removed: usize) -> usize {
    let bit = 1u32 << removed;
    let reduced = Problem {
        df: p.df.iter().enumerate().map(|(v, &d)| if v == removed { 0 } else { d }).collect(),
        factors: p.factors.iter().map(|f| Factor { mask: f.mask & !bit, ..*f }).collect(),
    };
    components(&reduced).len()
}

fn pivot(p: Problem, cfg: &EngineConfig, depth: usize) -> Value {
    let alive: Vec<usize> = (0..p.df.len()).filter(|&v| p.df[v] > 0).collect();
    let v = *alive
        .iter()
        .max_by_key(|&&v| {
            let deg = p.factors.iter().filter(|f| f.mask >> v & 1 == 1).count();
            (component_count(&p, v), deg, std::cmp::Reverse(v))
        })
        .expect("pivot needs variables");
    let bit = 1u32 << v;
    let k = p.df[v];
    let mut lo: f64 = 0.0;
    let mut hi = f64::INFINITY;
    for f in &p.factors {
        if f.mask & bit == 0 {
            continue;
        }
        match f.side {
            Side::Le => hi = hi.min(f.bound),
            Side::Gt if f.r == 0 && f.mask == bit => lo = lo.max(f.bound),
            Side::Gt => {}
        }
    }
    let mut tail = Value::exact(0.0);
    if hi.is_infinite() {
        // beyond every threshold involving v the remaining problem no longer depends on it
        let t = p.factors.iter().filter(|f| f.mask & bit != 0).map(|f| f.bound).fold(lo, f64::max);
        let s = chi2_upper(k, t);
        if s > 0.0 {
            tail = solve_at(substitute(&p, v, t), cfg, depth + 1).scale(s);
        }
        hi = t;
    }
    if !(hi > lo) {
        return tail;
    }
    let mut breaks = Vec::new();
    for f in p.factors.iter().filter(|f| f.mask & bit != 0) {
        breaks.push(f.bound);
        for g in p.factors.iter().filter(|g| g.mask & bit == 0) {
            breaks.push(f.bound - g.bound);
        }
    }
    let qc = QuadConfig {
        rel_tol: if depth == 0 { cfg.rel_tol } else { cfg.inner_rel_tol },
        abs_tol: cfg.abs_tol,
        max_intervals: cfg.max_intervals,
    };
    let mut all_converged = true;
    let est = integrate(
        |z| {
            let dens = chi2_density(k, z);
            if dens == 0.0 || !dens.is_finite() {
                return (0.0, 0.0);
            }
            let inner = solve_at(substitute(&p, v, z), cfg, depth + 1);
            all_converged &= inner.converged;
            (dens * inner.value, dens * inner.error)
        },
        lo,
        hi,
        &breaks,
        &qc,
    );
    Value {
        value: est.value + tail.value,
        error: est.error + tail.error,
        converged: est.converged && all_converged && tail.converged,
    }
}

fn substitute(p: &Problem, v: usize, z: f64) -> Problem {
    let bit = 1u32 << v;
    let mut df = p.df.clone();
    df[v] = 0;
    let factors = p
        .factors
        .iter()
        .map(|f| if f.mask & bit != 0 { Factor { mask: f.mask & !bit, bound: f.bound - z, ..*f } } else { *f })
        .collect();
    Problem { df, factors }
}

/// One variable; every factor's mask is that variable.
fn leaf(p: &Problem, v: usize, cfg: &EngineConfig) -> Value {
    let k = p.df[v];
    let mut lo: f64 = 0.0;
    let mut hi = f64::INFINITY;
    let mut soft: Vec<Factor> = Vec::new();
    for f in &p.factors {
        match (f.side, f.r) {
            (Side::Le, 0) => hi = hi.min(f.bound),
            (Side::Gt, 0) => lo = lo.max(f.bound),
            (Side::Le, _) => {
                hi = hi.min(f.bound);
                soft.push(*f);
            }
            (Side::Gt, _) => soft.push(*f),
        }
    }
    if !(hi > lo) {
        return Value::exact(0.0);
    }
    if soft.is_empty() {
        return Value::exact(chi2_mass(k, lo, hi));
    }
    if let [f] = soft[..] {
        if f.side == Side::Le && f.r == 2 {
            return Value::exact(le2_closed_form(k, f.bound, lo, hi).max(0.0));
        }
        if f.side == Side::Le && f.r == 1 && k == 2 && f.bound - hi > 1e-3 {
            return Value::exact(le1_df2_closed_form(f.bound, lo, hi).max(0.0));
        }
    }
    let mut tail = 0.0;
    if hi.is_infinite() {
        // only upper-tail factors remain; beyond their thresholds they equal 1
        let t = soft.iter().map(|f| f.bound).fold(lo, f64::max);
        tail = chi2_upper(k, t);
        hi = t;
        if !(hi > lo) {
            return Value::exact(tail);
        }
    }
    let breaks: Vec<f64> = soft.iter().map(|f| f.bound).collect();
    let qc = QuadConfig { rel_tol: cfg.inner_rel_tol, abs_tol: cfg.abs_tol, max_intervals: cfg.max_intervals };
    let est = integrate(
        |z| {
            let mut g = chi2_density(k, z);
            if !g.is_finite() {
                return (0.0, 0.0);
            }
            for f in &soft {
                g *= f.eval(z);
            }
            (g, 0.0)
        },
        lo,
        hi,
        &breaks,
        &qc,
    );
    Value { value: est.value + tail, error: est.error, converged: est.converged }
}

/// P(lo < χ²_k ≤ hi), differenced on whichever tail is smaller.
fn chi2_mass(k: u32, lo: f64, hi: f64) -> f64 {
    if lo > k as f64 {
        (chi2_upper(k, lo) - chi2_upper(k, hi)).max(0.0)
    } else {
        (chi2_lower(k, hi) - chi2_lower(k, lo)).max(0.0)
    }
}

/// ∫_lo^hi f_k(z) F_2(c − z) dz for hi ≤ c, using F_2(x) = 1 − e^{−x/2} and
/// f_k(z) e^{z/2} = z^{k/2−1} / (2^{k/2} Γ(k/2)).
fn le2_closed_form(k: u32, c: f64, lo: f64, hi: f64) -> f64 {
    let h = 0.5 * k as f64;
    let ln_norm = h * std::f64::consts::LN_2 + ln_gamma(h + 1.0);
    let pow = |z: f64| if z > 0.0 { (h * z.ln() - ln_norm - 0.5 * c).exp() } else { 0.0 };
    chi2_mass(k, lo, hi) - (pow(hi) - pow(lo))
}

/// ∫_lo^hi f_2(z) F_1(c − z) dz for hi ≤ c, from the antiderivative in
/// u = c − z of ½e^{−(c−u)/2} F_1(u).
pub(super) fn le1_df2_closed_form(c: f64, lo: f64, hi: f64) -> f64 {
    let anti = |u: f64| {
        let u = u.max(0.0);
        (-(c - u) / 2.0).exp() * chi2_lower(1, u) - (-c / 2.0).exp() * (2.0 * u / std::f64::consts::PI).sqrt()
    };
    anti(c - lo) - anti(c - hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_plain;
    use crate::special::ChiSq;

    fn cfg() -> EngineConfig {
        EngineConfig::default()
    }

    fn quad(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        integrate_plain(f, a, b, &[], &QuadConfig { rel_tol: 1e-12, abs_tol: 1e-20, max_intervals: 2000 }).value
    }

    #[test]
    fn absorption_gives_convolution_cdf() {
        // P(Z1 + Z2 + Z3 ≤ 7) with three χ²₁ = F_3(7)
        let p = Problem { df: vec![1, 1, 1], factors: vec![Factor::le(0b111, 7.0, 0)] };
        let v = solve(p, &cfg());
        assert!((v.value - ChiSq::new(3).unwrap().cdf(7.0)).abs() < 1e-15);
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for &(k, c, lo, hi) in &[(1u32, 10.0, 0.0, 10.0), (2, 12.0, 1.0, 7.5), (3, 9.0, 0.5, 9.0), (4, 20.0, 3.0, 18.0)] {
            let direct = quad(|z| chi2_density(k, z) * chi2_lower(2, c - z), lo, hi);
            assert!((le2_closed_form(k, c, lo, hi) - direct).abs() < 1e-12, "k={k}");
        }
        for &(c, lo, hi) in &[(10.0, 0.0, 9.0), (15.0, 2.0, 14.0), (20.0, 0.0, 3.0)] {
            let direct = quad(|z| chi2_density(2, z) * chi2_lower(1, c - z), lo, hi);
            assert!((le1_df2_closed_form(c, lo, hi) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_triplet_tail_matches_convolution() {
        // P(Z1+Z2+Z3 > w | each Z ≤ w) for singleton blocks, against a
        // one-dimensional convolution of the truncated density
        let w = 12.0;
        let f1w = ChiSq::new(1).unwrap().cdf(w);
        let p = Problem {
            df: vec![1, 1, 1],
            factors: vec![Factor::gt(0b111, w), Factor::le(0b001, w, 0), Factor::le(0b010, w, 0), Factor::le(0b100, w, 0)],
        };
        let v = solve(p, &cfg()).value / f1w.powi(3);
        // density of Z1+Z2 given each ≤ w, then P(S + Z3 > w)
        let pair_density = |s: f64| {
            let (a, b) = ((s - w).max(0.0), s.min(w));
            if b <= a {
                return 0.0;
            }
            quad(|y| chi2_density(1, y) * chi2_density(1, s - y), a, b)
        };
        let oracle = integrate_plain(
            |s| pair_density(s) * (chi2_lower(1, w) - chi2_lower(1, (w - s).max(0.0))),
            0.0,
            2.0 * w,
            &[w],
            &QuadConfig { rel_tol: 1e-10, abs_tol: 1e-20, max_intervals: 2000 },
        )
        .value
            / f1w.powi(3);
        assert!((v - oracle).abs() < 1e-8 * oracle, "{v} vs {oracle}");
    }

    #[test]
    fn contradiction_is_zero() {
        let p = Problem { df: vec![1, 1, 1], factors: vec![Factor::gt(0b111, 9.0), Factor::le(0b111, 9.0, 0)] };
        assert_eq!(solve(p, &cfg()).value, 0.0);
    }

    #[test]
    fn unbounded_pivot_uses_tail() {
        // P(Z1 + Z2 > 5, Z2 + Z3 > 5) without caps, against the conditional form
        // ∫ f1(y) S1(5−y)² dy
        let p = Problem { df: vec![1, 1, 1], factors: vec![Factor::gt(0b011, 5.0), Factor::gt(0b110, 5.0)] };
        let v = solve(p, &cfg()).value;
        let oracle = quad(|y| chi2_density(1, y) * chi2_upper(1, 5.0 - y).powi(2), 0.0, 5.0) + chi2_upper(1, 5.0);
        assert!((v - oracle).abs() < 1e-9 * oracle, "{v} vs {oracle}");
    }
}
