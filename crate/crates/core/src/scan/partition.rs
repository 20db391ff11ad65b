//! Disjoint blocks of internal nodes that condition the scan bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::chi2_upper;
use crate::tree::{PhyloTree, TripletSet};

/// Blocks of internal indices.  Every block lies inside some triplet, blocks
/// are disjoint, no two of them fit together inside one triplet, and together
/// they cover every node that appears in a triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionM {
    pub blocks: Vec<Vec<usize>>,
}

impl PartitionM {
    /// Number of blocks of each size 1, 2, 3.
    pub fn size_counts(&self) -> [usize; 3] {
        let mut t = [0; 3];
        for b in &self.blocks {
            t[b.len() - 1] += 1;
        }
        t
    }

    /// Block index for each internal node, `None` outside the partition.
    pub fn block_of(&self, n_internal: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_internal];
        for (k, b) in self.blocks.iter().enumerate() {
            for &a in b {
                out[a] = Some(k);
            }
        }
        out
    }

    /// ln P(M^c) = Σ_blocks ln F_{|block|}(w), where M is the event that some
    /// block's χ²₁ sum exceeds `w`.
    pub fn ln_prob_none(&self, w: f64) -> f64 {
        let t = self.size_counts();
        (1..=3u32)
            .map(|s| if t[s as usize - 1] == 0 { 0.0 } else { t[s as usize - 1] as f64 * (-chi2_upper(s, w)).ln_1p() })
            .sum()
    }

    /// P(M) = 1 − F₁(w)^{t₁} F₂(w)^{t₂} F₃(w)^{t₃}.
    pub fn prob_any(&self, w: f64) -> f64 {
        -self.ln_prob_none(w).exp_m1()
    }

    /// Checks the structural conditions against a triplet set.
    pub fn validate(&self, triplets: &TripletSet) -> Result<()> {
        let covered = triplets.covered_nodes();
        let mut seen = std::collections::HashSet::new();
        for b in &self.blocks {
            if b.is_empty() || b.len() > 3 {
                return Err(Error::InvalidConfig(format!("block {b:?} must have one to three nodes")));
            }
            for &a in b {
                if !seen.insert(a) {
                    return Err(Error::InvalidConfig(format!("node {a} appears in two blocks")));
                }
            }
            if !triplets.triplets.iter().any(|t| b.iter().all(|&a| t.contains(a))) {
                return Err(Error::InvalidConfig(format!("block {b:?} is not inside any triplet")));
            }
        }
        for &a in &covered {
            if !seen.contains(&a) {
                return Err(Error::InvalidConfig(format!("triplet node {a} is not in any block")));
            }
        }
        if seen.len() != covered.len() {
            return Err(Error::InvalidConfig("partition contains nodes outside every triplet".into()));
        }
        for (i, bi) in self.blocks.iter().enumerate() {
            for bj in &self.blocks[i + 1..] {
                if bi.len() + bj.len() <= 3
                    && triplets.triplets.iter().any(|t| bi.iter().chain(bj).all(|&a| t.contains(a)))
                {
                    return Err(Error::InvalidConfig(format!("blocks {bi:?} and {bj:?} fit in one triplet")));
                }
            }
        }
        Ok(())
    }
}

/// Greedy partition.  Nodes are visited in preorder, restricted to those that
/// appear in some triplet.  An unassigned node takes a chain with a child and
/// a grandchild if one exists (first child, then first grandchild), else a
/// chain with a child if that pair sits inside a triplet, else stays alone.
pub fn build_partition(tree: &PhyloTree, triplets: &TripletSet) -> PartitionM {
    let n = tree.n_internal();
    let mut in_scope = vec![false; n];
    for a in triplets.covered_nodes() {
        in_scope[a] = true;
    }
    let mut taken = vec![false; n];
    let mut blocks = Vec::new();
    for a in 0..n {
        if !in_scope[a] || taken[a] {
            continue;
        }
        let free_children: Vec<usize> = tree.internal_children(a).into_iter().filter(|&c| !taken[c]).collect();
        let chain3 = free_children.iter().find_map(|&c| {
            tree.internal_children(c).into_iter().find(|&g| !taken[g]).map(|g| vec![a, c, g])
        });
        let block = chain3.unwrap_or_else(|| {
            let pair = free_children
                .first()
                .map(|&c| vec![a, c])
                .filter(|b| triplets.triplets.iter().any(|t| b.iter().all(|&x| t.contains(x))));
            pair.unwrap_or_else(|| vec![a])
        });
        for &x in &block {
            taken[x] = true;
        }
        blocks.push(block);
    }
    PartitionM { blocks }
}
