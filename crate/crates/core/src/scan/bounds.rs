//! Upper bound `P_U` on `P(max_i W_i > w)` and the interval that contains it.
//!
//! With `M` the event that some partition block's Z-sum exceeds `w`,
//!
//! ```text
//! P(W > w) ≤ P_U = P(M) + P(M^c) Σ_i P(B_i ∩ B_{N_i}^c | M^c)
//! ```
//!
//! where `B_i = {W_i > w}` and `N_i` are the earlier triplets sharing two
//! nodes with triplet `i`.  The overshoot `P_U − P(W > w)` is at most
//! `P(M^c) Σ_i Σ_{j<i, j∉N_i} P(B_i ∩ B_j | M^c)`, which gives the lower end of
//! the interval.  Under `M^c` the blocks are independent and each block's
//! members are χ²₁ variables conditioned on their sum staying at or below `w`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::engine::{canonical_form, solve, EngineConfig, Factor, Problem, Value};
use super::partition::PartitionM;
use crate::error::{Error, Result};
use crate::special::{chi2_lower, chi2_upper, ChiSq};
use crate::tree::{PhyloTree, TripletSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub triplet: usize,
    pub value: f64,
    /// Absolute integration error estimate.
    pub error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDiagnostics {
    /// Pairs `j < i` of non-block triplets sharing no node.
    pub xi1: usize,
    /// Pairs `j < i` of non-block triplets sharing one node.
    pub xi2: usize,
    /// Number of three-node blocks.
    pub xi3: usize,
    pub xi_t: f64,
    pub w_t: f64,
    pub w: f64,
    /// Bound on `eps / P_U` when the conditions hold.
    pub rate_bound: f64,
    /// `ξ₃ (1 − F₃(w_T)) < 0.1` and `w_T ≥ 12`.
    pub conditions_met: bool,
    /// The weaker `(ξ₃ − 1)(1 − F₃(w_T)) < 0.1` and `w_T ≥ 12`.
    pub relaxed_condition: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub w: f64,
    /// P(M).
    pub p_m: f64,
    /// P(M^c).
    pub p_none: f64,
    pub p_upper: f64,
    /// Upper bound on `P_U − P(W > w)`, including integration error.
    pub eps_bound: f64,
    pub interval: (f64, f64),
    /// P(B_i ∩ B_{N_i}^c | M^c) per triplet.
    pub terms: Vec<TermEstimate>,
    /// Σ P(B_i ∩ B_j | M^c) over the non-neighbor pairs.
    pub pair_sum: f64,
    /// Integration error of the terms and pairs, on the probability scale.
    pub integration_error: f64,
    pub unconverged_terms: usize,
    pub rel_tol: f64,
    pub rate_diagnostics: Option<RateDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub alpha: f64,
    pub w: f64,
    pub p_upper: f64,
    pub eps_bound: f64,
    pub evaluations: usize,
}

/// Bound computations for one tree and partition.
#[derive(Debug, Clone)]
pub struct ScanBound<'a> {
    triplets: &'a TripletSet,
    partition: &'a PartitionM,
    block_of: Vec<Option<usize>>,
    /// Whether each triplet's node set is a block.
    is_block: Vec<bool>,
    cfg: EngineConfig,
    pair_cfg: EngineConfig,
    /// Results by problem shape; many triplets share the same local structure.
    cache: Arc<Mutex<HashMap<Vec<u64>, Value>>>,
}

impl<'a> ScanBound<'a> {
    pub fn new(tree: &PhyloTree, triplets: &'a TripletSet, partition: &'a PartitionM) -> Result<Self> {
        Self::with_config(tree, triplets, partition, EngineConfig::default())
    }

    pub fn with_config(tree: &PhyloTree, triplets: &'a TripletSet, partition: &'a PartitionM, cfg: EngineConfig) -> Result<Self> {
        tree.require_binary()?;
        if triplets.is_empty() {
            return Err(Error::NoTriplets);
        }
        partition.validate(triplets)?;
        let block_of = partition.block_of(tree.n_internal());
        let is_block = triplets
            .triplets
            .iter()
            .map(|t| {
                let k = block_of[t.parent];
                k.is_some() && t.nodes().iter().all(|&a| block_of[a] == k)
            })
            .collect();
        Ok(Self { triplets, partition, block_of, is_block, cfg, pair_cfg: cfg.loosened(), cache: Default::default() })
    }

    pub fn partition(&self) -> &PartitionM {
        self.partition
    }

    fn blocks_of(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.triplets.triplets[i].nodes().iter().map(|&a| self.block_of[a].expect("covered node")).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Builds `P(all exceed ∩ all stay | M^c)` as an integration problem.
    fn conditional(&self, exceed: &[usize], stay: &[usize], w: f64) -> Value {
        // pair probabilities only enter the overshoot bound, which absorbs their error
        let cfg = if exceed.len() > 1 { self.pair_cfg } else { self.cfg };
        let mut nodes: Vec<usize> = exceed.iter().chain(stay).flat_map(|&i| self.triplets.triplets[i].nodes()).collect();
        nodes.sort_unstable();
        nodes.dedup();
        assert!(nodes.len() <= 32, "too many nodes in one term");
        let bit = |a: usize| 1u32 << nodes.binary_search(&a).expect("node in set");
        let mask = |i: usize| self.triplets.triplets[i].nodes().iter().fold(0u32, |m, &a| m | bit(a));
        let mut factors = Vec::new();
        let mut norm = 1.0;
        let mut touched: Vec<usize> = nodes.iter().map(|&a| self.block_of[a].expect("covered node")).collect();
        touched.sort_unstable();
        touched.dedup();
        for k in touched {
            let block = &self.partition.blocks[k];
            let inside = block.iter().filter(|a| nodes.binary_search(a).is_ok()).fold(0u32, |m, &a| m | bit(a));
            let outside = block.len() as u32 - inside.count_ones();
            factors.push(Factor::le(inside, w, outside));
            norm *= chi2_lower(block.len() as u32, w);
        }
        for &i in exceed {
            factors.push(Factor::gt(mask(i), w));
        }
        for &j in stay {
            factors.push(Factor::le(mask(j), w, 0));
        }
        let v = self.solve_cached(Problem { df: vec![1; nodes.len()], factors }, &cfg);
        Value { value: v.value / norm, error: v.error / norm, converged: v.converged }
    }

    fn solve_cached(&self, p: Problem, cfg: &EngineConfig) -> Value {
        let (p, key) = canonical_form(&p);
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return *v;
        }
        let v = solve(p, cfg);
        self.cache.lock().expect("cache lock").insert(key, v);
        v
    }

    /// P(B_i | M^c).
    pub fn single(&self, i: usize, w: f64) -> TermEstimate {
        if self.is_block[i] {
            return TermEstimate { triplet: i, value: 0.0, error: 0.0, converged: true };
        }
        to_term(i, self.conditional(&[i], &[], w))
    }

    /// P(B_i ∩ B_{N_i}^c | M^c).
    pub fn term(&self, i: usize, w: f64) -> TermEstimate {
        if self.is_block[i] {
            return TermEstimate { triplet: i, value: 0.0, error: 0.0, converged: true };
        }
        to_term(i, self.conditional(&[i], &self.triplets.neighbors[i], w))
    }

    /// P(B_i ∩ B_j | M^c).
    pub fn pair(&self, i: usize, j: usize, w: f64) -> TermEstimate {
        if self.is_block[i] || self.is_block[j] {
            return TermEstimate { triplet: i, value: 0.0, error: 0.0, converged: true };
        }
        if self.blocks_of(i).iter().all(|k| !self.blocks_of(j).contains(k)) {
            let (a, b) = (self.single(i, w), self.single(j, w));
            let v = Value { value: a.value, error: a.error, converged: a.converged };
            let u = Value { value: b.value, error: b.error, converged: b.converged };
            return to_term(i, product(v, u));
        }
        to_term(i, self.conditional(&[i, j], &[], w))
    }

    /// Pairs `(i, j)`, `j < i`, `j ∉ N_i`, in sorted order.
    fn non_neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.triplets.len() {
            let nb = &self.triplets.neighbors[i];
            for j in 0..i {
                if !nb.contains(&j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn terms(&self, w: f64) -> Vec<TermEstimate> {
        (0..self.triplets.len()).into_par_iter().map(|i| self.term(i, w)).collect()
    }

    /// `P_U` and its integration error.
    pub fn p_upper(&self, w: f64) -> (f64, f64) {
        let p_none = self.partition.ln_prob_none(w).exp();
        let p_m = self.partition.prob_any(w);
        let terms = self.terms(w);
        let sum: f64 = terms.iter().map(|t| t.value).sum();
        let err: f64 = terms.iter().map(|t| t.error).sum();
        ((p_m + p_none * sum).min(1.0), p_none * err)
    }

    /// Full report at `w`, with pair sums for the overshoot bound.
    pub fn report(&self, w: f64) -> Result<BoundReport> {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Domain(format!("threshold must be nonnegative and finite, got {w}")));
        }
        if w == 0.0 {
            // every W_i is positive with probability one
            return Ok(BoundReport {
                w,
                p_m: 1.0,
                p_none: 0.0,
                p_upper: 1.0,
                eps_bound: 0.0,
                interval: (1.0, 1.0),
                terms: Vec::new(),
                pair_sum: 0.0,
                integration_error: 0.0,
                unconverged_terms: 0,
                rel_tol: self.cfg.rel_tol,
                rate_diagnostics: None,
            });
        }
        let p_none = self.partition.ln_prob_none(w).exp();
        let p_m = self.partition.prob_any(w);
        let terms = self.terms(w);
        let singles: Vec<TermEstimate> = (0..self.triplets.len()).into_par_iter().map(|i| self.single(i, w)).collect();
        let pairs = self.non_neighbor_pairs();
        let pair_terms: Vec<TermEstimate> = pairs
            .par_iter()
            .map(|&(i, j)| {
                if self.is_block[i] || self.is_block[j] {
                    TermEstimate { triplet: i, value: 0.0, error: 0.0, converged: true }
                } else if self.blocks_of(i).iter().all(|k| !self.blocks_of(j).contains(k)) {
                    let (a, b) = (&singles[i], &singles[j]);
                    to_term(
                        i,
                        product(
                            Value { value: a.value, error: a.error, converged: a.converged },
                            Value { value: b.value, error: b.error, converged: b.converged },
                        ),
                    )
                } else {
                    to_term(i, self.conditional(&[i, j], &[], w))
                }
            })
            .collect();
        let term_sum: f64 = terms.iter().map(|t| t.value).sum();
        let term_err: f64 = terms.iter().map(|t| t.error).sum();
        let pair_sum: f64 = pair_terms.iter().map(|t| t.value).sum();
        let pair_err: f64 = pair_terms.iter().map(|t| t.error).sum();
        let p_upper = (p_m + p_none * term_sum).min(1.0);
        // a term may be underestimated by its error, and the upper end moves with it
        let eps_bound = p_none * (pair_sum + pair_err + 2.0 * term_err);
        let lower = (p_upper - eps_bound).max(p_m).max(0.0);
        let unconverged_terms =
            terms.iter().chain(&pair_terms).filter(|t| !t.converged).count();
        Ok(BoundReport {
            w,
            p_m,
            p_none,
            p_upper,
            eps_bound,
            interval: (lower.min(p_upper), p_upper),
            terms,
            pair_sum,
            integration_error: p_none * (term_err + pair_err),
            unconverged_terms,
            rel_tol: self.cfg.rel_tol,
            rate_diagnostics: None,
        })
    }

    /// Counts and rate bound for the relative overshoot `eps / P_U` at `w`,
    /// calibrated at `w_t`.
    pub fn rate_diagnostics(&self, w_t: f64, w: f64) -> Result<RateDiagnostics> {
        if !(w_t > 0.0 && w >= w_t && w.is_finite()) {
            return Err(Error::Domain(format!("need 0 < w_T ≤ w, got w_T = {w_t}, w = {w}")));
        }
        let (mut xi1, mut xi2) = (0, 0);
        for (i, j) in self.non_neighbor_pairs() {
            if self.is_block[i] || self.is_block[j] {
                continue;
            }
            match self.triplets.triplets[i].shared(&self.triplets.triplets[j]) {
                0 => xi1 += 1,
                1 => xi2 += 1,
                _ => {}
            }
        }
        let xi3 = self.partition.size_counts()[2];
        let s3_t = chi2_upper(3, w_t);
        let p_none_t = self.partition.ln_prob_none(w_t).exp();
        let sum_t: f64 = self.terms(w_t).iter().map(|t| t.value).sum();
        let xi_t = p_none_t * sum_t / s3_t;
        let denom = 0.95 * xi3 as f64 + xi_t;
        let rate_bound = if xi1 == 0 && xi2 == 0 {
            0.0
        } else {
            xi1 as f64 * chi2_upper(3, w) / denom + 0.9 * xi2 as f64 / denom * (std::f64::consts::FRAC_PI_2).sqrt() / w
        };
        Ok(RateDiagnostics {
            xi1,
            xi2,
            xi3,
            xi_t,
            w_t,
            w,
            rate_bound,
            conditions_met: xi3 as f64 * s3_t < 0.1 && w_t >= 12.0,
            relaxed_condition: (xi3 as f64 - 1.0) * s3_t < 0.1 && w_t >= 12.0,
        })
    }

    /// The threshold `w` with `P_U(w) = alpha`, to within `1e-4·alpha`.
    pub fn solve_threshold(&self, alpha: f64) -> Result<Threshold> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let chi3 = ChiSq::new(3)?;
        let mut evaluations = 0;
        let mut eval = |w: f64| {
            evaluations += 1;
            self.p_upper(w).0
        };
        let target = alpha.ln();
        // P_U ≥ P(B_1) = 1 − F₃(w) gives the lower end
        let mut lo = chi3.isf(alpha)?;
        let mut f_lo = eval(lo).ln() - target;
        let mut guard = 0;
        while f_lo < 0.0 {
            lo *= 0.5;
            f_lo = eval(lo).ln() - target;
            guard += 1;
            if guard > 60 {
                return Err(Error::Degenerate(format!("cannot bracket P_U = {alpha} from below")));
            }
        }
        let b = self.triplets.len() as f64;
        let mut hi = chi3.isf(alpha / (3.0 * b))?.max(lo + 1.0);
        let mut f_hi = eval(hi).ln() - target;
        while f_hi > 0.0 {
            hi += 0.25 * hi;
            f_hi = eval(hi).ln() - target;
            guard += 1;
            if guard > 120 {
                return Err(Error::Degenerate(format!("cannot bracket P_U = {alpha} from above")));
            }
        }
        let tol = 0.5e-4 * alpha;
        let (mut w, mut fw) = if f_lo.abs() < f_hi.abs() { (lo, f_lo) } else { (hi, f_hi) };
        let mut side = 0i8;
        for _ in 0..200 {
            if (fw.exp_m1() * alpha).abs() <= tol || hi - lo <= 1e-12 * hi {
                break;
            }
            // Illinois variant of false position on ln P_U
            let mut next = hi - f_hi * (hi - lo) / (f_hi - f_lo);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let fn_ = eval(next).ln() - target;
            if fn_ > 0.0 {
                lo = next;
                f_lo = fn_;
                if side == 1 {
                    f_hi *= 0.5;
                }
                side = 1;
            } else {
                hi = next;
                f_hi = fn_;
                if side == -1 {
                    f_lo *= 0.5;
                }
                side = -1;
            }
            w = next;
            fw = fn_;
        }
        let report = self.report(w)?;
        Ok(Threshold { alpha, w, p_upper: report.p_upper, eps_bound: report.eps_bound, evaluations })
    }

    /// `P(B_1) + Σ_{i≥2} min_{j<i} P(B_i ∩ B_j^c)` without conditioning on
    /// the partition.
    pub fn bonferroni_baseline(&self, w: f64) -> f64 {
        let s3 = chi2_upper(3, w);
        // unconditional joint exceedance by number of shared nodes
        let joint = |shared: usize| -> f64 {
            let df = vec![1u32; 6 - shared];
            let (a, b) = match shared {
                0 => return s3 * s3,
                1 => (0b00111, 0b11100),
                2 => (0b0111, 0b1110),
                _ => return s3,
            };
            solve(Problem { df, factors: vec![Factor::gt(a, w), Factor::gt(b, w)] }, &self.cfg).value
        };
        let j = [joint(0), joint(1), joint(2)];
        let mut total = s3;
        for i in 1..self.triplets.len() {
            let ti = &self.triplets.triplets[i];
            let most = (0..i).map(|k| ti.shared(&self.triplets.triplets[k])).max().unwrap_or(0);
            total += s3 - j[most.min(2)];
        }
        total
    }
}

fn product(a: Value, b: Value) -> Value {
    Value {
        value: a.value * b.value,
        error: a.error * b.value + b.error * a.value + a.error * b.error,
        converged: a.converged && b.converged,
    }
}

fn to_term(i: usize, v: Value) -> TermEstimate {
    TermEstimate { triplet: i, value: v.value.max(0.0), error: v.error, converged: v.converged }
}

/// Builds the greedy partition and reports the bound at the observed `w`.
pub fn bound_pvalue(tree: &PhyloTree, triplets: &TripletSet, w: f64) -> Result<BoundReport> {
    let partition = super::partition::build_partition(tree, triplets);
    let sb = ScanBound::new(tree, triplets, &partition)?;
    let mut report = sb.report(w)?;
    if w >= 12.0 {
        report.rate_diagnostics = Some(sb.rate_diagnostics(12.0, w)?);
    }
    Ok(report)
}
