//! Rooted phylogenetic trees: Newick parsing, count aggregation to internal
//! nodes, triplet enumeration and taxonomic labeling of internal nodes.
//!
//! Nodes are stored in preorder, so every parent precedes its children and the
//! leaves under any node form a contiguous run of the left-to-right leaf order.
//! Statistics address internal nodes by their *internal index*: the position
//! of the node in the preorder list of internal nodes (the root is 0).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counts::CountTable;
use crate::error::{Error, Result};
use crate::io::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Leaf index for leaves.
    pub leaf: Option<usize>,
    /// Half-open range of leaf indices covered by this node.
    pub leaf_range: (usize, usize),
    pub label: Option<String>,
    pub length: Option<f64>,
}

/// Node record used to assemble a tree programmatically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawNode {
    pub name: Option<String>,
    pub length: Option<f64>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyloTree {
    leaf_names: Vec<String>,
    leaf_nodes: Vec<usize>,
    nodes: Vec<Node>,
    internal: Vec<usize>,
    internal_pos: Vec<Option<usize>>,
}

impl PhyloTree {
    /// Builds a tree from raw records rooted at `root`.  Internal nodes with a
    /// single child are collapsed into that child.
    pub fn from_raw(raw: &[RawNode], root: usize) -> Result<Self> {
        let mut nodes = Vec::with_capacity(raw.len());
        let mut leaf_names = Vec::new();
        let mut leaf_nodes = Vec::new();
        // (raw index, parent in output)
        let mut stack = vec![(root, None::<usize>)];
        let mut visited = vec![false; raw.len()];
        while let Some((mut r, parent)) = stack.pop() {
            let mut length = raw.get(r).ok_or_else(|| Error::Input(format!("node {r} out of range")))?.length;
            // collapse chains of unary nodes, accumulating branch lengths
            while raw[r].children.len() == 1 {
                if std::mem::replace(&mut visited[r], true) {
                    return Err(Error::Input("cycle in node records".into()));
                }
                r = raw[r].children[0];
                length = sum_len(length, raw.get(r).ok_or_else(|| Error::Input("bad child".into()))?.length);
            }
            if std::mem::replace(&mut visited[r], true) {
                return Err(Error::Input("node reached twice; records do not form a tree".into()));
            }
            let id = nodes.len();
            if let Some(p) = parent {
                let pn: &mut Node = &mut nodes[p];
                pn.children.push(id);
            }
            let is_leaf = raw[r].children.is_empty();
            let leaf = if is_leaf {
                let name = raw[r].name.clone().unwrap_or_default();
                if name.is_empty() {
                    return Err(Error::Input("leaf without a label".into()));
                }
                leaf_names.push(name);
                leaf_nodes.push(id);
                Some(leaf_names.len() - 1)
            } else {
                None
            };
            nodes.push(Node {
                parent,
                children: Vec::new(),
                leaf,
                leaf_range: (0, 0),
                label: if is_leaf { None } else { raw[r].name.clone() },
                length,
            });
            for &c in raw[r].children.iter().rev() {
                stack.push((c, Some(id)));
            }
        }
        Self::finish(nodes, leaf_names, leaf_nodes)
    }

    fn finish(mut nodes: Vec<Node>, leaf_names: Vec<String>, leaf_nodes: Vec<usize>) -> Result<Self> {
        if leaf_names.len() < 2 {
            return Err(Error::SingleLeaf);
        }
        let mut seen = HashSet::new();
        for n in &leaf_names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateLeaf(n.clone()));
            }
        }
        for v in (0..nodes.len()).rev() {
            nodes[v].leaf_range = match nodes[v].leaf {
                Some(l) => (l, l + 1),
                None => {
                    let first = nodes[v].children[0];
                    let last = *nodes[v].children.last().expect("internal node has children");
                    (nodes[first].leaf_range.0, nodes[last].leaf_range.1)
                }
            };
        }
        let internal: Vec<usize> = (0..nodes.len()).filter(|&v| nodes[v].leaf.is_none()).collect();
        let mut internal_pos = vec![None; nodes.len()];
        for (a, &v) in internal.iter().enumerate() {
            internal_pos[v] = Some(a);
        }
        Ok(Self { leaf_names, leaf_nodes, nodes, internal, internal_pos })
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_names.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_internal(&self) -> usize {
        self.internal.len()
    }

    pub fn leaf_names(&self) -> &[String] {
        &self.leaf_names
    }

    pub fn node(&self, v: usize) -> &Node {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        0
    }

    /// Node id of leaf `l`.
    pub fn leaf_node(&self, l: usize) -> usize {
        self.leaf_nodes[l]
    }

    /// Internal node ids in preorder.
    pub fn internal_nodes(&self) -> &[usize] {
        &self.internal
    }

    /// Node id of internal index `a`.
    pub fn internal_node(&self, a: usize) -> usize {
        self.internal[a]
    }

    /// Internal index of node `v`, if internal.
    pub fn internal_index(&self, v: usize) -> Option<usize> {
        self.internal_pos[v]
    }

    /// Parent of internal index `a` as an internal index.
    pub fn internal_parent(&self, a: usize) -> Option<usize> {
        self.nodes[self.internal[a]].parent.map(|p| self.internal_pos[p].expect("parents are internal"))
    }

    /// Internal children of internal index `a`, in child order.
    pub fn internal_children(&self, a: usize) -> Vec<usize> {
        self.nodes[self.internal[a]].children.iter().filter_map(|&c| self.internal_pos[c]).collect()
    }

    pub fn arity(&self, v: usize) -> usize {
        self.nodes[v].children.len()
    }

    pub fn is_binary(&self) -> bool {
        self.internal.iter().all(|&v| self.nodes[v].children.len() == 2)
    }

    pub fn require_binary(&self) -> Result<()> {
        match self.internal.iter().find(|&&v| self.nodes[v].children.len() != 2) {
            Some(&v) => Err(Error::NonBinaryTree { node: v, arity: self.nodes[v].children.len() }),
            None => Ok(()),
        }
    }

    /// Leaf indices under node `v`.
    pub fn leaves_under(&self, v: usize) -> std::ops::Range<usize> {
        let (a, b) = self.nodes[v].leaf_range;
        a..b
    }

    /// Strict ancestry test on node ids.
    pub fn is_ancestor(&self, anc: usize, v: usize) -> bool {
        anc != v && {
            let (a0, a1) = self.nodes[anc].leaf_range;
            let (v0, v1) = self.nodes[v].leaf_range;
            anc < v && a0 <= v0 && v1 <= a1
        }
    }

    /// Serializes topology, labels and branch lengths to Newick.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_node(self.root(), &mut out);
        out.push(';');
        out
    }

    fn write_node(&self, v: usize, out: &mut String) {
        let node = &self.nodes[v];
        if let Some(l) = node.leaf {
            out.push_str(&quote_label(&self.leaf_names[l]));
        } else {
            out.push('(');
            for (i, &c) in node.children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.write_node(c, out);
            }
            out.push(')');
            if let Some(lab) = &node.label {
                out.push_str(&quote_label(lab));
            }
        }
        if let Some(len) = node.length {
            let _ = write!(out, ":{len}");
        }
    }
}

fn sum_len(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x + y),
        (x, None) => x,
        (None, y) => y,
    }
}

fn quote_label(s: &str) -> String {
    if s.chars().any(|c| "()[]':;,".contains(c) || c.is_whitespace()) {
        format!("'{}'", s.replace('\'', "''"))
    } else {
        s.to_string()
    }
}

/// Parses a Newick string.  Branch lengths and internal labels are kept as
/// metadata; bracketed comments are skipped.
pub fn parse_newick(text: &str) -> Result<PhyloTree> {
    let mut p = NewickParser { s: text.as_bytes(), pos: 0, raw: Vec::new() };
    p.skip_ws();
    let root = p.subtree()?;
    p.skip_ws();
    if p.peek() != Some(b';') {
        return Err(p.err("expected `;` at end of tree"));
    }
    p.pos += 1;
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(p.err("unexpected text after `;`"));
    }
    PhyloTree::from_raw(&p.raw, root)
}

struct NewickParser<'a> {
    s: &'a [u8],
    pos: usize,
    raw: Vec<RawNode>,
}

impl NewickParser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse { offset: self.pos, message: msg.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'[') => {
                    while let Some(c) = self.peek() {
                        self.pos += 1;
                        if c == b']' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn subtree(&mut self) -> Result<usize> {
        self.skip_ws();
        let mut children = Vec::new();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                children.push(self.subtree()?);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.err("expected `,` or `)`")),
                }
            }
        }
        self.skip_ws();
        let name = self.label()?;
        self.skip_ws();
        let mut length = None;
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit() || b"+-.eE".contains(&c)) {
                self.pos += 1;
            }
            let txt = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
            length = Some(txt.parse::<f64>().map_err(|_| Error::Parse {
                offset: start,
                message: format!("invalid branch length `{txt}`"),
            })?);
        }
        if children.is_empty() && name.as_deref().map_or(true, str::is_empty) {
            return Err(self.err("leaf without a label"));
        }
        self.raw.push(RawNode { name, length, children });
        Ok(self.raw.len() - 1)
    }

    fn label(&mut self) -> Result<Option<String>> {
        if self.peek() == Some(b'\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = Vec::new();
            loop {
                match self.peek() {
                    None => {
                        return Err(Error::Parse { offset: start, message: "unterminated quoted label".into() })
                    }
                    Some(b'\'') if self.s.get(self.pos + 1) == Some(&b'\'') => {
                        out.push(b'\'');
                        self.pos += 2;
                    }
                    Some(b'\'') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => {
                        out.push(c);
                        self.pos += 1;
                    }
                }
            }
            return Ok(Some(String::from_utf8_lossy(&out).into_owned()));
        }
        let start = self.pos;
        while matches!(self.peek(), Some(c) if !b"()[]':;,".contains(&c) && !c.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Ok(None);
        }
        let txt = std::str::from_utf8(&self.s[start..self.pos])
            .map_err(|_| Error::Parse { offset: start, message: "label is not valid UTF-8".into() })?;
        Ok(Some(txt.to_string()))
    }
}

/// Child counts of one internal node across samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounts {
    /// Internal index of the node.
    pub node: usize,
    /// Per sample, the counts of each child subtree.
    pub counts: Vec<Vec<u64>>,
}

impl NodeCounts {
    pub fn totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Maps table columns onto tree leaves; errors list unmatched names.
pub fn leaf_column_map(tree: &PhyloTree, table: &CountTable) -> Result<Vec<usize>> {
    let cols = table.category_index();
    let mut map = Vec::with_capacity(tree.n_leaves());
    let mut only_in_tree = Vec::new();
    for name in tree.leaf_names() {
        match cols.get(name.as_str()) {
            Some(&j) => map.push(j),
            None => only_in_tree.push(name.clone()),
        }
    }
    let leaves: HashSet<&str> = tree.leaf_names().iter().map(String::as_str).collect();
    let only_in_table: Vec<String> =
        table.categories().iter().filter(|c| !leaves.contains(c.as_str())).cloned().collect();
    if !only_in_tree.is_empty() || !only_in_table.is_empty() {
        return Err(Error::NameMismatch { only_in_table, only_in_tree });
    }
    Ok(map)
}

/// Leaf-ordered count rows (columns permuted to the tree's leaf order).
pub fn leaf_ordered_rows(tree: &PhyloTree, table: &CountTable) -> Result<Vec<Vec<u64>>> {
    let map = leaf_column_map(tree, table)?;
    Ok(table.rows().iter().map(|row| map.iter().map(|&j| row[j]).collect()).collect())
}

/// Aggregates leaf counts to the children of every internal node.
pub fn aggregate_counts(tree: &PhyloTree, table: &CountTable) -> Result<Vec<NodeCounts>> {
    let rows = leaf_ordered_rows(tree, table)?;
    Ok(aggregate_leaf_rows(tree, &rows))
}

/// As [`aggregate_counts`] for rows already in leaf order.
pub fn aggregate_leaf_rows(tree: &PhyloTree, rows: &[Vec<u64>]) -> Vec<NodeCounts> {
    let prefix: Vec<Vec<u64>> = rows
        .par_iter()
        .map(|row| {
            let mut p = Vec::with_capacity(row.len() + 1);
            p.push(0u64);
            let mut acc = 0u64;
            for &x in row {
                acc += x;
                p.push(acc);
            }
            p
        })
        .collect();
    tree.internal_nodes()
        .iter()
        .enumerate()
        .map(|(a, &v)| {
            let children = &tree.node(v).children;
            let counts = prefix
                .iter()
                .map(|p| {
                    children
                        .iter()
                        .map(|&c| {
                            let (lo, hi) = tree.node(c).leaf_range;
                            p[hi] - p[lo]
                        })
                        .collect()
                })
                .collect();
            NodeCounts { node: a, counts }
        })
        .collect()
}

/// Three consecutive internal nodes (parent, middle, child), as internal indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub parent: usize,
    pub middle: usize,
    pub child: usize,
}

impl Triplet {
    pub fn nodes(&self) -> [usize; 3] {
        [self.parent, self.middle, self.child]
    }

    pub fn contains(&self, a: usize) -> bool {
        self.parent == a || self.middle == a || self.child == a
    }

    pub fn shared(&self, other: &Triplet) -> usize {
        self.nodes().iter().filter(|&&a| other.contains(a)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    /// For each triplet, the earlier triplets sharing exactly two nodes.
    pub neighbors: Vec<Vec<usize>>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Sorted internal indices appearing in at least one triplet.
    pub fn covered_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.triplets.iter().flat_map(|t| t.nodes()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Enumerates triplets ordered by the preorder position of the middle node,
/// then by child order.
pub fn enumerate_triplets(tree: &PhyloTree) -> TripletSet {
    let mut triplets = Vec::new();
    for a in 0..tree.n_internal() {
        if let Some(p) = tree.internal_parent(a) {
            for c in tree.internal_children(a) {
                triplets.push(Triplet { parent: p, middle: a, child: c });
            }
        }
    }
    let mut by_node: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, t) in triplets.iter().enumerate() {
        for a in t.nodes() {
            by_node.entry(a).or_default().push(i);
        }
    }
    let neighbors = triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut cand: Vec<usize> = t
                .nodes()
                .iter()
                .flat_map(|a| by_node[a].iter().copied())
                .filter(|&j| j < i && triplets[j].shared(t) == 2)
                .collect();
            cand.sort_unstable();
            cand.dedup();
            cand
        })
        .collect();
    TripletSet { triplets, neighbors }
}

/// Taxonomic label of an internal node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaxonLabel {
    Classified { rank: String, taxon: String },
    Unclassified,
}

impl std::fmt::Display for TaxonLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaxonLabel::Classified { rank, taxon } => write!(f, "{rank}:{taxon}"),
            TaxonLabel::Unclassified => f.write_str("unclassified"),
        }
    }
}

/// For each internal index, the finest rank at which all descendant OTUs with
/// a recorded taxon agree.
pub fn label_internal_taxa(tree: &PhyloTree, taxonomy: &Taxonomy) -> Vec<TaxonLabel> {
    tree.internal_nodes()
        .iter()
        .map(|&v| {
            let lineages: Vec<&[Option<String>]> = tree
                .leaves_under(v)
                .filter_map(|l| taxonomy.lineage(&tree.leaf_names()[l]))
                .collect();
            let mut label = TaxonLabel::Unclassified;
            for (r, rank) in taxonomy.ranks().iter().enumerate() {
                let mut values = lineages.iter().filter_map(|lin| lin.get(r).and_then(Option::as_deref));
                let Some(first) = values.next() else { break };
                if values.any(|x| x != first) {
                    break;
                }
                label = TaxonLabel::Classified { rank: rank.clone(), taxon: first.to_string() };
            }
            label
        })
        .collect()
}

/// Name of the bucket collecting OTUs without a taxon at the requested rank.
pub const UNCLASSIFIED: &str = "unclassified";

/// Sums table columns that share a taxon at `rank`.
pub fn group_by_rank(table: &CountTable, taxonomy: &Taxonomy, rank: &str) -> Result<CountTable> {
    let r = taxonomy
        .rank_index(rank)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown rank `{rank}`; known: {:?}", taxonomy.ranks())))?;
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let assignment = table
        .categories()
        .iter()
        .map(|otu| {
            let taxon = taxonomy
                .lineage(otu)
                .and_then(|lin| lin.get(r).cloned().flatten())
                .unwrap_or_else(|| UNCLASSIFIED.to_string());
            *index.entry(taxon.clone()).or_insert_with(|| {
                names.push(taxon);
                names.len() - 1
            })
        })
        .collect::<Vec<_>>();
    table.merge_columns(&assignment, names)
}
