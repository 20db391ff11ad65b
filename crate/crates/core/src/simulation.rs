//! Monte Carlo drivers: null distribution of the scan statistic, synthetic
//! trees and count tables, spiked alternatives, power and calibration
//! studies.
//!
//! Every random quantity comes from a [`CounterRng`] keyed by
//! `(seed, replicate, stream)`, so results do not depend on how replicates
//! are scheduled across threads.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Binomial, Distribution, Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dm::{mom_test, DmParams};
use crate::dtm::{node_tests_aggregated, DtmParams};
use crate::error::{Error, Result};
use crate::special::ChiSq;
use crate::tree::{aggregate_leaf_rows, parse_newick, PhyloTree, TripletSet};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream whose starting point is a hash of `(seed, replicate,
/// stream)`.  Successive outputs hash successive counter values.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64, replicate: u64, stream: u64) -> Self {
        let k = mix64(mix64(mix64(seed ^ GOLDEN) ^ replicate.wrapping_mul(GOLDEN)) ^ stream.wrapping_add(0x6A09_E667_F3BC_C909));
        Self { state: k }
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let b = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&b[..chunk.len()]);
        }
    }
}

// stream tags for the different uses of one replicate
const STREAM_SPLIT: u64 = u64::MAX;
const STREAM_TARGET: u64 = u64::MAX - 1;
const STREAM_TABLE: u64 = u64::MAX - 2;

/// Random binary tree with `n_leaves` leaves named `otu1..`, built by
/// coalescing random pairs of lineages with exponential waiting times.
pub fn random_binary_tree(n_leaves: usize, seed: u64) -> Result<PhyloTree> {
    if n_leaves < 2 {
        return Err(Error::SingleLeaf);
    }
    let mut rng = CounterRng::new(seed, 0, 0);
    // (newick, height)
    let mut lineages: Vec<(String, f64)> = (1..=n_leaves).map(|i| (format!("otu{i}"), 0.0)).collect();
    let mut now = 0.0;
    while lineages.len() > 1 {
        let k = lineages.len() as f64;
        now += Exp::new(k * (k - 1.0) / 2.0).expect("positive rate").sample(&mut rng);
        let i = rng.random_range(0..lineages.len());
        let (a, ha) = lineages.swap_remove(i);
        let j = rng.random_range(0..lineages.len());
        let (b, hb) = lineages.swap_remove(j);
        lineages.push((format!("({a}:{:.6},{b}:{:.6})", now - ha, now - hb), now));
    }
    parse_newick(&format!("{};", lineages[0].0))
}

/// Dirichlet draw via normalized gammas; falls back to the mean when every
/// gamma underflows.
fn dirichlet<R: Rng>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = alpha
        .iter()
        .map(|&a| if a > 0.0 { Gamma::new(a, 1.0).expect("positive shape").sample(rng) } else { 0.0 })
        .collect();
    let s: f64 = g.iter().sum();
    if s > 0.0 && s.is_finite() {
        g.iter().map(|x| x / s).collect()
    } else {
        let t: f64 = alpha.iter().sum();
        alpha.iter().map(|a| a / t).collect()
    }
}

fn multinomial<R: Rng>(n: u64, p: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; p.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (j, &pj) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == p.len() || mass <= 0.0 {
            out[j] = left;
            break;
        }
        let q = (pj / mass).clamp(0.0, 1.0);
        let x = Binomial::new(left, q).expect("valid binomial").sample(rng);
        out[j] = x;
        left -= x;
        mass -= pj;
    }
    out
}

/// One DM draw of total `n`.
pub fn sample_dm<R: Rng>(params: &DmParams, n: u64, rng: &mut R) -> Vec<u64> {
    let p = if params.nu.is_finite() {
        dirichlet(&params.pi.iter().map(|&x| x * params.nu).collect::<Vec<_>>(), rng)
    } else {
        params.pi.clone()
    };
    multinomial(n, &p, rng)
}

/// One leaf-ordered DTM draw of total `n`, splitting counts down the tree.
pub fn sample_dtm<R: Rng>(tree: &PhyloTree, params: &DtmParams, n: u64, rng: &mut R) -> Vec<u64> {
    let mut leaves = vec![0u64; tree.n_leaves()];
    let mut stack = vec![(tree.root(), n)];
    while let Some((v, count)) = stack.pop() {
        let node = tree.node(v);
        if let Some(l) = node.leaf {
            leaves[l] = count;
            continue;
        }
        let a = tree.internal_index(v).expect("internal node");
        let split = if count == 0 { vec![0; node.children.len()] } else { sample_dm(&params.nodes[a], count, rng) };
        for (&c, &x) in node.children.iter().zip(&split) {
            stack.push((c, x));
        }
    }
    leaves
}

/// DTM parameters with node proportions drawn from a symmetric Dirichlet
/// with concentration `pi_concentration` and dispersions `ν` log-uniform on
/// `nu_range`.
pub fn random_dtm_params(tree: &PhyloTree, pi_concentration: f64, nu_range: (f64, f64), seed: u64) -> DtmParams {
    let mut rng = CounterRng::new(seed, 0, STREAM_TABLE);
    let (lo, hi) = (nu_range.0.ln(), nu_range.1.ln());
    let nodes = tree
        .internal_nodes()
        .iter()
        .map(|&v| {
            let k = tree.node(v).children.len();
            let pi = dirichlet(&vec![pi_concentration; k], &mut rng);
            let nu = (lo + (hi - lo) * rng.random::<f64>()).exp();
            DmParams { pi, nu }
        })
        .collect();
    DtmParams { nodes }
}

/// Leaf-ordered DTM table with `n_samples` rows and totals uniform on
/// `depth_range`.
pub fn sample_dtm_table(tree: &PhyloTree, params: &DtmParams, n_samples: usize, depth_range: (u64, u64), seed: u64) -> Vec<Vec<u64>> {
    (0..n_samples)
        .map(|i| {
            let mut rng = CounterRng::new(seed, i as u64, STREAM_TABLE);
            let n = rng.random_range(depth_range.0..=depth_range.1);
            sample_dtm(tree, params, n, &mut rng)
        })
        .collect()
}

/// Null exceedance proportions of the scan statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullMaxResult {
    pub ws: Vec<f64>,
    pub draws_per_replicate: usize,
    /// `exceed[r][k]` = proportion of draws in replicate `r` with `W > ws[k]`.
    pub exceed: Vec<Vec<f64>>,
}

impl NullMaxResult {
    /// Mean over replicates for each `w`.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.ws.len()).map(|k| self.exceed.iter().map(|r| r[k]).sum::<f64>() / self.exceed.len() as f64).collect()
    }

    /// Binomial standard error of the pooled proportion for each `w`.
    pub fn pooled_se(&self) -> Vec<f64> {
        let n = (self.exceed.len() * self.draws_per_replicate) as f64;
        self.mean().iter().map(|&p| (p * (1.0 - p) / n).sqrt()).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tparameter\tmetric\tvalue\n");
        let (mean, se) = (self.mean(), self.pooled_se());
        for (k, w) in self.ws.iter().enumerate() {
            let _ = writeln!(s, "null_max\t{w}\tmean_exceedance\t{}", mean[k]);
            let _ = writeln!(s, "null_max\t{w}\tstandard_error\t{}", se[k]);
            for (r, row) in self.exceed.iter().enumerate() {
                let _ = writeln!(s, "null_max\t{w}\treplicate_{r}\t{}", row[k]);
            }
        }
        s
    }
}

/// Draws independent χ²₁ node values, forms every triplet sum and records how
/// often the maximum exceeds each of `ws`.
pub fn simulate_null_max(
    n_internal: usize,
    triplets: &TripletSet,
    ws: &[f64],
    replicates: usize,
    draws: usize,
    seed: u64,
) -> Result<NullMaxResult> {
    if triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    if replicates == 0 || draws == 0 {
        return Err(Error::InvalidConfig("replicates and draws must be positive".into()));
    }
    let idx: Vec<[usize; 3]> = triplets.triplets.iter().map(|t| t.nodes()).collect();
    let exceed = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut counts = vec![0usize; ws.len()];
            let mut z = vec![0.0f64; n_internal];
            for d in 0..draws {
                let mut rng = CounterRng::new(seed, r as u64, d as u64);
                for v in z.iter_mut() {
                    let x: f64 = rng.sample(StandardNormal);
                    *v = x * x;
                }
                let w = idx.iter().map(|t| z[t[0]] + z[t[1]] + z[t[2]]).fold(0.0, f64::max);
                for (k, &wk) in ws.iter().enumerate() {
                    if w > wk {
                        counts[k] += 1;
                    }
                }
            }
            counts.iter().map(|&c| c as f64 / draws as f64).collect()
        })
        .collect();
    Ok(NullMaxResult { ws: ws.to_vec(), draws_per_replicate: draws, exceed })
}

/// Which OTU or node an alternative spikes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Fixed(usize),
    Random,
}

/// Spiked alternative applied to the second group of a random equal split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Alternative {
    /// Multiply one OTU (leaf index) by `1 + fraction`.
    SingleOtu { otu: Target, fraction: f64 },
    /// Multiply every OTU below an internal node by `1 + fraction`.  Random
    /// targets are non-root nodes with at least `min_leaves` leaves.
    Subtree { node: Target, fraction: f64, min_leaves: usize },
}

impl Alternative {
    pub fn fraction(&self) -> f64 {
        match *self {
            Alternative::SingleOtu { fraction, .. } | Alternative::Subtree { fraction, .. } => fraction,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Alternative::SingleOtu { fraction, .. } => format!("otu+{}%", fraction * 100.0),
            Alternative::Subtree { fraction, .. } => format!("subtree+{}%", fraction * 100.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let f = self.fraction();
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::InvalidConfig(format!("increment fraction must be nonnegative, got {f}")));
        }
        if let Alternative::Subtree { min_leaves, .. } = *self {
            if min_leaves < 2 {
                return Err(Error::InvalidConfig("min_leaves must be at least 2".into()));
            }
        }
        Ok(())
    }
}

/// A random two-group split with the second group spiked.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub rows: Vec<Vec<u64>>,
    pub groups: Vec<Vec<usize>>,
    /// Spiked leaf index or internal index.
    pub target: Option<usize>,
}

fn inflate(x: u64, fraction: f64) -> u64 {
    if x == 0 || fraction == 0.0 {
        return x;
    }
    let y = (x as f64 * (1.0 + fraction)).round() as u64;
    if y == x {
        x + 1
    } else {
        y
    }
}

fn random_split<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let half = n / 2;
    let mut a = idx[..half].to_vec();
    let mut b = idx[half..2 * half].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    vec![a, b]
}

/// Splits `base_rows` (leaf-ordered) into two equal random groups and spikes
/// the second group.
pub fn generate_alternative(
    tree: &PhyloTree,
    base_rows: &[Vec<u64>],
    alt: &Alternative,
    seed: u64,
    replicate: u64,
) -> Result<SplitData> {
    alt.validate()?;
    if base_rows.len() < 4 {
        return Err(Error::InsufficientData("need at least 4 samples to split".into()));
    }
    let mut rng = CounterRng::new(seed, replicate, STREAM_SPLIT);
    let groups = random_split(base_rows.len(), &mut rng);
    let mut trng = CounterRng::new(seed, replicate, STREAM_TARGET);
    let (range, target) = match *alt {
        Alternative::SingleOtu { otu, .. } => {
            let j = match otu {
                Target::Fixed(j) if j < tree.n_leaves() => j,
                Target::Fixed(j) => return Err(Error::InvalidConfig(format!("OTU index {j} out of range"))),
                Target::Random => trng.random_range(0..tree.n_leaves()),
            };
            (j..j + 1, j)
        }
        Alternative::Subtree { node, min_leaves, .. } => {
            let a = match node {
                Target::Fixed(a) if a < tree.n_internal() => a,
                Target::Fixed(a) => return Err(Error::InvalidConfig(format!("internal node {a} out of range"))),
                Target::Random => {
                    let eligible: Vec<usize> = (1..tree.n_internal())
                        .filter(|&a| tree.leaves_under(tree.internal_node(a)).len() >= min_leaves)
                        .collect();
                    if eligible.is_empty() {
                        return Err(Error::InvalidConfig(format!("no non-root node has at least {min_leaves} leaves")));
                    }
                    eligible[trng.random_range(0..eligible.len())]
                }
            };
            (tree.leaves_under(tree.internal_node(a)), a)
        }
    };
    let mut rows = base_rows.to_vec();
    for &i in &groups[1] {
        for j in range.clone() {
            rows[i][j] = inflate(rows[i][j], alt.fraction());
        }
    }
    Ok(SplitData { rows, groups, target: Some(target) })
}

/// Statistics compared in the power study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// −ln p of the DM moment test on the OTU table.
    DmOtu,
    /// Largest node Z value.
    OneNodeMax,
    /// Largest triplet sum.
    TripletScan,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DmOtu, Method::OneNodeMax, Method::TripletScan];

    pub fn name(&self) -> &'static str {
        match self {
            Method::DmOtu => "dm_otu",
            Method::OneNodeMax => "dtm_1node_max",
            Method::TripletScan => "dtm_triplet_scan",
        }
    }
}

fn dm_ln_p(rows: &[Vec<u64>], groups: &[Vec<usize>]) -> f64 {
    let per: Vec<Vec<&[u64]>> = groups.iter().map(|g| g.iter().map(|&i| rows[i].as_slice()).collect()).collect();
    let slices: Vec<&[&[u64]]> = per.iter().map(Vec::as_slice).collect();
    match mom_test(&slices) {
        Ok(r) => ChiSq::new(r.df).map(|c| c.ln_sf(r.statistic).min(0.0)).unwrap_or(0.0),
        Err(_) => 0.0,
    }
}

/// Statistic of each method on one split, in the order of `methods`.
pub fn method_statistics(tree: &PhyloTree, triplets: &TripletSet, data: &SplitData, methods: &[Method]) -> Vec<f64> {
    let agg = aggregate_leaf_rows(tree, &data.rows);
    let needs_nodes = methods.iter().any(|m| *m != Method::DmOtu);
    let z: Vec<f64> = if needs_nodes {
        node_tests_aggregated(&agg, &data.groups).iter().map(|r| r.z).collect()
    } else {
        Vec::new()
    };
    methods
        .iter()
        .map(|m| match m {
            Method::DmOtu => -dm_ln_p(&data.rows, &data.groups),
            Method::OneNodeMax => z.iter().copied().fold(0.0, f64::max),
            Method::TripletScan => {
                triplets.triplets.iter().map(|t| t.nodes().iter().map(|&a| z[a]).sum::<f64>()).fold(0.0, f64::max)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodPower {
    pub method: Method,
    pub null_stats: Vec<f64>,
    pub alt_stats: Vec<f64>,
    /// Empirical null quantile at `1 − fpr`.
    pub threshold: f64,
    pub power: f64,
    /// (false-positive rate, true-positive rate) at each null statistic.
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerStudy {
    pub alternative: Alternative,
    pub fpr: f64,
    pub methods: Vec<MethodPower>,
}

impl PowerStudy {
    pub fn power_of(&self, m: Method) -> Option<f64> {
        self.methods.iter().find(|x| x.method == m).map(|x| x.power)
    }
}

/// Smallest value exceeded by at most a fraction `fpr` of `null`.
pub fn null_threshold(null: &[f64], fpr: f64) -> f64 {
    let mut s = null.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((1.0 - fpr) * s.len() as f64).ceil() as usize;
    s[k.clamp(1, s.len()) - 1]
}

fn roc_curve(null: &[f64], alt: &[f64]) -> Vec<(f64, f64)> {
    let mut thr = null.to_vec();
    thr.sort_by(|a, b| b.total_cmp(a));
    let mut out = vec![(0.0, 0.0)];
    for t in thr {
        let fpr = null.iter().filter(|&&x| x >= t).count() as f64 / null.len() as f64;
        let tpr = alt.iter().filter(|&&x| x >= t).count() as f64 / alt.len() as f64;
        if out.last() != Some(&(fpr, tpr)) {
            out.push((fpr, tpr));
        }
    }
    out.push((1.0, 1.0));
    out.dedup();
    out
}

/// Power of each method against each alternative.  Null statistics come from
/// unspiked random splits and fix each method's threshold at false-positive
/// rate `fpr`.
pub fn power_study(
    tree: &PhyloTree,
    triplets: &TripletSet,
    base_rows: &[Vec<u64>],
    alternatives: &[Alternative],
    methods: &[Method],
    replicates: usize,
    fpr: f64,
    seed: u64,
) -> Result<Vec<PowerStudy>> {
    if methods.is_empty() || replicates == 0 {
        return Err(Error::InvalidConfig("need at least one method and one replicate".into()));
    }
    if !(fpr > 0.0 && fpr < 1.0) {
        return Err(Error::InvalidConfig(format!("false-positive rate must lie in (0, 1), got {fpr}")));
    }
    let null_alt = Alternative::SingleOtu { otu: Target::Fixed(0), fraction: 0.0 };
    let run = |alt: &Alternative, offset: u64| -> Result<Vec<Vec<f64>>> {
        (0..replicates)
            .into_par_iter()
            .map(|r| {
                let d = generate_alternative(tree, base_rows, alt, seed, offset + r as u64)?;
                Ok(method_statistics(tree, triplets, &d, methods))
            })
            .collect()
    };
    let null = run(&null_alt, 0)?;
    let mut out = Vec::with_capacity(alternatives.len());
    for (k, alt) in alternatives.iter().enumerate() {
        let stats = run(alt, ((k as u64) + 1) << 32)?;
        let per_method = methods
            .iter()
            .enumerate()
            .map(|(m, &method)| {
                let null_stats: Vec<f64> = null.iter().map(|s| s[m]).collect();
                let alt_stats: Vec<f64> = stats.iter().map(|s| s[m]).collect();
                let threshold = null_threshold(&null_stats, fpr);
                let power = alt_stats.iter().filter(|&&x| x > threshold).count() as f64 / alt_stats.len() as f64;
                let roc = roc_curve(&null_stats, &alt_stats);
                MethodPower { method, null_stats, alt_stats, threshold, power, roc }
            })
            .collect();
        out.push(PowerStudy { alternative: *alt, fpr, methods: per_method });
    }
    Ok(out)
}

pub fn power_tsv(studies: &[PowerStudy]) -> String {
    let mut s = String::from("method\tparameter\tmetric\tvalue\n");
    for st in studies {
        let label = st.alternative.label();
        for m in &st.methods {
            let name = m.method.name();
            let _ = writeln!(s, "{name}\t{label}\tpower_at_fpr_{}\t{}", st.fpr, m.power);
            let _ = writeln!(s, "{name}\t{label}\tnull_threshold\t{}", m.threshold);
            for (f, t) in &m.roc {
                let _ = writeln!(s, "{name}\t{label}\troc_tpr_at_fpr_{f}\t{t}");
            }
        }
    }
    s
}

/// Kolmogorov–Smirnov comparison with the uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub n: usize,
    pub distance: f64,
    pub p_value: f64,
}

pub fn ks_uniform(sample: &[f64]) -> KsResult {
    let mut s: Vec<f64> = sample.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let nf = n as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / nf).max((i + 1) as f64 / nf - x))
        .fold(0.0, f64::max);
    KsResult { n, distance: d, p_value: kolmogorov_sf(d, n) }
}

/// Asymptotic Kolmogorov tail with the Stephens small-sample correction.
fn kolmogorov_sf(d: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// p-values collected over repeated null splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub dm_otu: Vec<f64>,
    pub dm_rank: Option<Vec<f64>>,
    /// Per-node p-values from all replicates, skipped nodes left out.
    pub dtm_nodes: Vec<f64>,
    /// Per-node p-values by internal index.
    pub dtm_by_node: Vec<Vec<f64>>,
    /// Node Z values by replicate.
    pub z: Vec<Vec<f64>>,
}

impl Calibration {
    pub fn ks_dm_otu(&self) -> KsResult {
        ks_uniform(&self.dm_otu)
    }

    pub fn ks_dtm(&self) -> KsResult {
        ks_uniform(&self.dtm_nodes)
    }

    pub fn ks_dm_rank(&self) -> Option<KsResult> {
        self.dm_rank.as_deref().map(ks_uniform)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tparameter\tmetric\tvalue\n");
        let mut emit = |name: &str, p: &[f64]| {
            let ks = ks_uniform(p);
            let _ = writeln!(s, "{name}\tall\tks_distance\t{}", ks.distance);
            let _ = writeln!(s, "{name}\tall\tks_p_value\t{}", ks.p_value);
            let mut hist = [0usize; 20];
            for &x in p {
                hist[((x * 20.0) as usize).min(19)] += 1;
            }
            for (b, c) in hist.iter().enumerate() {
                let _ = writeln!(s, "{name}\t{:.2}\thistogram_density\t{}", b as f64 / 20.0, *c as f64 * 20.0 / p.len().max(1) as f64);
            }
        };
        emit("dm_otu", &self.dm_otu);
        if let Some(r) = &self.dm_rank {
            emit("dm_rank", r);
        }
        emit("dtm_nodes", &self.dtm_nodes);
        s
    }
}

/// Repeated random equal splits of `base_rows` with no spike.  When
/// `rank_columns` is given, leaf columns are also pooled into those groups
/// and tested with the DM moment test.
pub fn null_calibration(
    tree: &PhyloTree,
    base_rows: &[Vec<u64>],
    rank_columns: Option<&[Vec<usize>]>,
    replicates: usize,
    seed: u64,
) -> Result<Calibration> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be positive".into()));
    }
    let null_alt = Alternative::SingleOtu { otu: Target::Fixed(0), fraction: 0.0 };
    let per_rep: Vec<(f64, Option<f64>, Vec<(f64, bool)>, Vec<f64>)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let d = generate_alternative(tree, base_rows, &null_alt, seed, r as u64)?;
            let dm = dm_ln_p(&d.rows, &d.groups).exp();
            let rank = rank_columns.map(|cols| {
                let merged: Vec<Vec<u64>> =
                    d.rows.iter().map(|row| cols.iter().map(|c| c.iter().map(|&j| row[j]).sum()).collect()).collect();
                dm_ln_p(&merged, &d.groups).exp()
            });
            let agg = aggregate_leaf_rows(tree, &d.rows);
            let res = node_tests_aggregated(&agg, &d.groups);
            let nodes = res.iter().map(|x| (x.p_value, x.skipped.is_none())).collect();
            let z = res.iter().map(|x| x.z).collect();
            Ok((dm, rank, nodes, z))
        })
        .collect::<Result<_>>()?;
    let n_int = tree.n_internal();
    let mut dtm_by_node = vec![Vec::with_capacity(replicates); n_int];
    let mut dtm_nodes = Vec::new();
    for (_, _, nodes, _) in &per_rep {
        for (a, &(p, ok)) in nodes.iter().enumerate() {
            if ok {
                dtm_by_node[a].push(p);
                dtm_nodes.push(p);
            }
        }
    }
    Ok(Calibration {
        dm_otu: per_rep.iter().map(|x| x.0).collect(),
        dm_rank: rank_columns.map(|_| per_rep.iter().map(|x| x.1.unwrap_or(1.0)).collect()),
        dtm_nodes,
        dtm_by_node,
        z: per_rep.into_iter().map(|x| x.3).collect(),
    })
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
