use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("duplicate leaf label `{0}`")]
    DuplicateLeaf(String),

    #[error("tree must have at least two leaves")]
    SingleLeaf,

    #[error("identifier mismatch between count table and tree (only in table: {only_in_table:?}; only in tree: {only_in_tree:?})")]
    NameMismatch {
        only_in_table: Vec<String>,
        only_in_tree: Vec<String>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("tree is not binary: internal node {node} has {arity} children; use per-node Sidak testing for multifurcating trees")]
    NonBinaryTree { node: usize, arity: usize },

    #[error("the tree has no triplets of consecutive internal nodes; use per-node Sidak testing instead")]
    NoTriplets,

    #[error("degenerate test: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    Input(String),
}
