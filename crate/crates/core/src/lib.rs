//! Dirichlet-tree multinomial node tests and a triplet scan statistic over
//! phylogenetic trees, with a computable interval for the scan p-value.
//!
//! The pipeline runs count tables through per-node moment tests
//! ([`dtm::node_tests`]), maps node p-values onto a χ²₁ scale, sums them over
//! triplets of consecutive internal nodes ([`scan::scan_statistic`]) and bounds
//! the tail probability of the maximum ([`scan::bound_pvalue`]).

pub mod counts;
pub mod dm;
pub mod dtm;
pub mod error;
pub mod io;
pub mod optim;
pub mod quadrature;
pub mod scan;
pub mod simulation;
pub mod special;
pub mod tree;

pub use counts::CountTable;
pub use error::{Error, Result};
pub use tree::{PhyloTree, Triplet, TripletSet};
