//! Dirichlet-tree multinomial model: likelihood, per-node cross-group tests,
//! family-wise corrections, maximum likelihood and the DM-versus-DTM
//! likelihood-ratio test.
//!
//! Count rows passed to this module are in the tree's leaf order (see
//! [`crate::tree::leaf_ordered_rows`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dm::{dm_log_pmf, dm_mle, mom_test, DmFit, DmParams};
use crate::error::{Error, Result};
use crate::special::ChiSq;
use crate::tree::{aggregate_leaf_rows, NodeCounts, PhyloTree};

/// Local DM parameters for every internal node, by internal index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmParams {
    pub nodes: Vec<DmParams>,
}

/// Log probability of one leaf-ordered count vector.
pub fn dtm_log_pmf(tree: &PhyloTree, params: &DtmParams, sample: &[u64]) -> Result<f64> {
    if sample.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch { expected: tree.n_leaves(), found: sample.len() });
    }
    if params.nodes.len() != tree.n_internal() {
        return Err(Error::DimensionMismatch { expected: tree.n_internal(), found: params.nodes.len() });
    }
    let agg = aggregate_leaf_rows(tree, std::slice::from_ref(&sample.to_vec()));
    agg.iter().zip(&params.nodes).map(|(nc, p)| dm_log_pmf(p, &nc.counts[0])).sum()
}

/// The DTM parameters under which the DTM coincides with a DM whose
/// proportions `dm.pi` are given in leaf order.
pub fn dm_to_dtm(tree: &PhyloTree, dm: &DmParams) -> Result<DtmParams> {
    if dm.pi.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch { expected: tree.n_leaves(), found: dm.pi.len() });
    }
    let mut prefix = vec![0.0; dm.pi.len() + 1];
    for (i, p) in dm.pi.iter().enumerate() {
        prefix[i + 1] = prefix[i] + p;
    }
    let mass = |v: usize| {
        let (a, b) = tree.node(v).leaf_range;
        prefix[b] - prefix[a]
    };
    let nodes = tree
        .internal_nodes()
        .iter()
        .map(|&v| {
            let total = mass(v);
            let children = &tree.node(v).children;
            if total <= 0.0 {
                let k = children.len() as f64;
                return DmParams { pi: vec![1.0 / k; children.len()], nu: dm.nu };
            }
            DmParams { pi: children.iter().map(|&c| mass(c) / total).collect(), nu: dm.nu * total }
        })
        .collect();
    Ok(DtmParams { nodes })
}

/// Per-node test outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTestResult {
    /// Internal index.
    pub node: usize,
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
    /// ln p, finite even when p underflows.
    pub ln_p: f64,
    /// Upper-tail χ²₁ inversion of the p-value.
    pub z: f64,
    /// Set when the node could not be tested and was assigned p = 1.
    pub skipped: Option<String>,
}

impl NodeTestResult {
    fn skipped(node: usize, why: String) -> Self {
        Self { node, statistic: 0.0, df: 0, p_value: 1.0, ln_p: 0.0, z: 0.0, skipped: Some(why) }
    }
}

/// Maps a p-value (given as ln p) onto the χ²₁ scale: Z = F₁⁻¹(1 − p).
pub fn z_from_ln_p(ln_p: f64) -> f64 {
    let ln_p = ln_p.min(0.0);
    ChiSq::new(1).and_then(|c| c.isf_ln(ln_p)).unwrap_or(0.0)
}

/// Runs the moment test at every internal node.  `groups` holds row indices
/// into `rows` (leaf-ordered count rows).
pub fn node_tests(tree: &PhyloTree, rows: &[Vec<u64>], groups: &[Vec<usize>]) -> Result<Vec<NodeTestResult>> {
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 groups, got {}", groups.len())));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != tree.n_leaves()) {
        return Err(Error::DimensionMismatch { expected: tree.n_leaves(), found: r.len() });
    }
    let agg = aggregate_leaf_rows(tree, rows);
    Ok(node_tests_aggregated(&agg, groups))
}

/// As [`node_tests`] on precomputed node counts.
pub fn node_tests_aggregated(agg: &[NodeCounts], groups: &[Vec<usize>]) -> Vec<NodeTestResult> {
    agg.par_iter().map(|nc| test_node(nc, groups)).collect()
}

fn test_node(nc: &NodeCounts, groups: &[Vec<usize>]) -> NodeTestResult {
    let per_group: Vec<Vec<&[u64]>> = groups
        .iter()
        .map(|g| g.iter().map(|&i| nc.counts[i].as_slice()).filter(|r| r.iter().any(|&v| v > 0)).collect())
        .collect();
    if let Some(small) = per_group.iter().position(|g| g.len() < 2) {
        return NodeTestResult::skipped(
            nc.node,
            format!("group {small} has {} samples with counts at this node", per_group[small].len()),
        );
    }
    let slices: Vec<&[&[u64]]> = per_group.iter().map(Vec::as_slice).collect();
    match mom_test(&slices) {
        Ok(r) => {
            let chi = ChiSq::new(r.df).expect("df >= 1");
            let ln_p = chi.ln_sf(r.statistic).min(0.0);
            NodeTestResult {
                node: nc.node,
                statistic: r.statistic,
                df: r.df,
                p_value: r.p_value,
                ln_p,
                z: z_from_ln_p(ln_p),
                skipped: None,
            }
        }
        Err(e) => NodeTestResult::skipped(nc.node, e.to_string()),
    }
}

/// Sidak-corrected global p-value, 1 − (1 − min p)^|I|.
pub fn sidak_global(results: &[NodeTestResult]) -> f64 {
    let m = results.len() as f64;
    let pmin = results.iter().map(|r| r.p_value).fold(1.0, f64::min);
    (-(m * (-pmin).ln_1p()).exp_m1()).clamp(0.0, 1.0)
}

/// Per-node level giving family-wise error `alpha` across `m` independent tests.
pub fn uniform_sidak_alpha(alpha: f64, m: usize) -> f64 {
    -((-alpha).ln_1p() / m as f64).exp_m1()
}

/// Checks that per-node levels compose to the family-wise level:
/// 1 − Π(1 − α_A) = α.  Returns the composed level.
pub fn validate_alpha_allocation(alphas: &[f64], alpha: f64, tol: f64) -> Result<f64> {
    if alphas.iter().any(|a| !(0.0..1.0).contains(a)) {
        return Err(Error::InvalidConfig("per-node levels must lie in [0, 1)".into()));
    }
    let composed = -alphas.iter().map(|a| (-a).ln_1p()).sum::<f64>().exp_m1();
    if (composed - alpha).abs() > tol {
        return Err(Error::InvalidConfig(format!(
            "per-node levels compose to a family-wise level of {composed:.6}, not {alpha}"
        )));
    }
    Ok(composed)
}

/// Node rejections at the given per-node levels.
pub fn fwer_reject(results: &[NodeTestResult], alphas: &[f64]) -> Vec<bool> {
    results.iter().zip(alphas).map(|(r, &a)| r.p_value <= a).collect()
}

/// Fitted DTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmFit {
    pub params: DtmParams,
    pub log_likelihood: f64,
    /// Per-node fits; `None` for nodes without any counts.
    pub node_fits: Vec<Option<DmFit>>,
    pub converged: bool,
}

/// Fits each node's local DM separately; the log-likelihood is their sum.
/// With `init`, each node also starts from those parameters and keeps the
/// better of the two fits.
pub fn dtm_mle(tree: &PhyloTree, rows: &[Vec<u64>], init: Option<&DtmParams>) -> Result<DtmFit> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no samples".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != tree.n_leaves()) {
        return Err(Error::DimensionMismatch { expected: tree.n_leaves(), found: r.len() });
    }
    let agg = aggregate_leaf_rows(tree, rows);
    let fits: Vec<Result<Option<DmFit>>> = agg
        .par_iter()
        .map(|nc| {
            if nc.counts.iter().all(|r| r.iter().all(|&v| v == 0)) {
                return Ok(None);
            }
            let mut best = dm_mle(&nc.counts, None)?;
            if let Some(p) = init.and_then(|d| d.nodes.get(nc.node)) {
                if p.nu.is_finite() && p.pi.iter().all(|&x| x > 0.0) {
                    let alt = dm_mle(&nc.counts, Some(p))?;
                    if alt.log_likelihood > best.log_likelihood {
                        best = alt;
                    }
                }
            }
            Ok(Some(best))
        })
        .collect();
    let mut node_fits = Vec::with_capacity(fits.len());
    for f in fits {
        node_fits.push(f?);
    }
    let params = DtmParams {
        nodes: node_fits
            .iter()
            .zip(tree.internal_nodes())
            .map(|(f, &v)| match f {
                Some(f) => f.params.clone(),
                None => {
                    let k = tree.arity(v);
                    DmParams { pi: vec![1.0 / k as f64; k], nu: 1.0 }
                }
            })
            .collect(),
    };
    let log_likelihood = node_fits.iter().flatten().map(|f| f.log_likelihood).sum();
    let converged = node_fits.iter().flatten().all(|f| f.converged || f.boundary);
    Ok(DtmFit { params, log_likelihood, node_fits, converged })
}

/// Likelihood-ratio comparison of a single DM against the DTM on the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub lambda: f64,
    pub df: u32,
    pub p_value: f64,
    pub dm_log_likelihood: f64,
    pub dtm_log_likelihood: f64,
    pub warnings: Vec<String>,
}

/// Λ = 2(ℓ_DTM − ℓ_DM), referred to χ² with |I| − 1 degrees of freedom.
pub fn lrt_dm_vs_dtm(tree: &PhyloTree, rows: &[Vec<u64>]) -> Result<LrtResult> {
    tree.require_binary()?;
    if tree.n_internal() < 2 {
        return Err(Error::Degenerate("a tree with one internal node is the DM itself".into()));
    }
    let dm = dm_mle(rows, None)?;
    let mut warnings = Vec::new();
    if !dm.converged && !dm.boundary {
        warnings.push(format!("DM fit did not converge after {} iterations", dm.iterations));
    }
    let mapped = if dm.params.nu.is_finite() { Some(dm_to_dtm(tree, &dm.params)?) } else { None };
    let dtm = dtm_mle(tree, rows, mapped.as_ref())?;
    if !dtm.converged {
        let bad: Vec<usize> = dtm
            .node_fits
            .iter()
            .enumerate()
            .filter(|(_, f)| f.as_ref().is_some_and(|f| !f.converged && !f.boundary))
            .map(|(a, _)| a)
            .collect();
        warnings.push(format!("DTM fits did not converge at internal nodes {bad:?}"));
    }
    let raw = 2.0 * (dtm.log_likelihood - dm.log_likelihood);
    if raw < -1e-6 {
        warnings.push(format!("negative likelihood ratio {raw:.3e} clipped to 0"));
    }
    let lambda = raw.max(0.0);
    let df = (tree.n_internal() - 1) as u32;
    let p_value = ChiSq::new(df)?.sf(lambda);
    Ok(LrtResult {
        lambda,
        df,
        p_value,
        dm_log_likelihood: dm.log_likelihood,
        dtm_log_likelihood: dtm.log_likelihood,
        warnings,
    })
}
