//! Triplet scan statistic and an interval for its tail probability.
//!
//! Each internal node carries `Z_A`, the upper-tail χ²₁ inversion of its
//! node-test p-value.  A triplet's statistic `W_i` is the sum of `Z_A` over its
//! three nodes and the scan statistic is `W = max_i W_i`.  Under the null the
//! `Z_A` are independent χ²₁, and [`bounds`] computes an upper bound `P_U` on
//! `P(W > w)` together with a bound on its overshoot.

pub mod bounds;
pub mod density;
mod engine;
pub mod partition;

pub use bounds::{bound_pvalue, BoundReport, ScanBound, TermEstimate, RateDiagnostics, Threshold};
pub use density::{conditional_density_tables, DensityTables};
pub use engine::EngineConfig;
pub use partition::{build_partition, PartitionM};

use serde::{Deserialize, Serialize};

use crate::dtm::NodeTestResult;
use crate::error::{Error, Result};
use crate::tree::{Triplet, TripletSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanStatistics {
    /// `W_i` per triplet.
    pub w: Vec<f64>,
    pub max: f64,
    /// First triplet attaining the maximum.
    pub argmax: usize,
    pub triplet: Triplet,
}

/// Computes every `W_i` from per-node `Z` values indexed by internal index.
pub fn scan_statistic(z: &[f64], triplets: &TripletSet) -> Result<ScanStatistics> {
    if triplets.is_empty() {
        return Err(Error::NoTriplets);
    }
    let mut w = Vec::with_capacity(triplets.len());
    for t in &triplets.triplets {
        let mut s = 0.0;
        for a in t.nodes() {
            let za = *z.get(a).ok_or(Error::DimensionMismatch { expected: a + 1, found: z.len() })?;
            if !(za >= 0.0) {
                return Err(Error::Domain(format!("Z value {za} at node {a} must be finite and nonnegative")));
            }
            s += za;
        }
        w.push(s);
    }
    let mut argmax = 0;
    for (i, &v) in w.iter().enumerate() {
        if v > w[argmax] {
            argmax = i;
        }
    }
    Ok(ScanStatistics { max: w[argmax], argmax, triplet: triplets.triplets[argmax], w })
}

/// [`scan_statistic`] from node-test results.
pub fn scan_from_results(results: &[NodeTestResult], triplets: &TripletSet) -> Result<ScanStatistics> {
    let n = results.iter().map(|r| r.node + 1).max().unwrap_or(0);
    let mut z = vec![f64::NAN; n];
    for r in results {
        z[r.node] = r.z;
    }
    scan_statistic(&z, triplets)
}
