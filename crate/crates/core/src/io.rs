//! Sample metadata and OTU taxonomy tables, and group construction.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranked lineages keyed by OTU identifier.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Taxonomy {
    ranks: Vec<String>,
    lineages: HashMap<String, Vec<Option<String>>>,
}

impl Taxonomy {
    pub fn new(ranks: Vec<String>, lineages: HashMap<String, Vec<Option<String>>>) -> Self {
        Self { ranks, lineages }
    }

    pub fn ranks(&self) -> &[String] {
        &self.ranks
    }

    pub fn rank_index(&self, rank: &str) -> Option<usize> {
        self.ranks.iter().position(|r| r.eq_ignore_ascii_case(rank))
    }

    pub fn lineage(&self, otu: &str) -> Option<&[Option<String>]> {
        self.lineages.get(otu).map(Vec::as_slice)
    }

    /// Reads a TSV whose header is `otu_id` followed by rank names, coarsest
    /// first.  Empty cells are missing.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let (header, rows) = read_table(reader)?;
        let ranks = header[1..].to_vec();
        if ranks.is_empty() {
            return Err(Error::Input("taxonomy table has no rank columns".into()));
        }
        let mut lineages = HashMap::with_capacity(rows.len());
        for row in rows {
            let otu = row[0].clone();
            let lin = (1..=ranks.len())
                .map(|c| row.get(c).map(|s| s.trim()).filter(|s| !s.is_empty()).map(str::to_string))
                .collect();
            if lineages.insert(otu.clone(), lin).is_some() {
                return Err(Error::Input(format!("duplicate taxonomy entry for `{otu}`")));
            }
        }
        Ok(Self { ranks, lineages })
    }
}

/// Sample metadata: one row per sample, named columns of text values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Metadata {
    columns: Vec<String>,
    rows: HashMap<String, Vec<String>>,
    order: Vec<String>,
}

impl Metadata {
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let (header, body) = read_table(reader)?;
        let columns = header[1..].to_vec();
        let mut rows = HashMap::with_capacity(body.len());
        let mut order = Vec::with_capacity(body.len());
        for mut row in body {
            let id = row.remove(0);
            row.resize(columns.len(), String::new());
            order.push(id.clone());
            if rows.insert(id.clone(), row).is_some() {
                return Err(Error::Input(format!("duplicate metadata row for sample `{id}`")));
            }
        }
        Ok(Self { columns, rows, order })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn value(&self, sample: &str, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.get(sample).map(|r| r[c].as_str())
    }

    /// Assigns each of `samples` to a group by the value in `column`, after
    /// applying `rule`.  Samples with a missing value are left out.  Groups are
    /// ordered by label.
    pub fn groups(&self, samples: &[String], column: &str, rule: Option<&GroupRule>) -> Result<Vec<(String, Vec<usize>)>> {
        let c = self
            .columns
            .iter()
            .position(|x| x == column)
            .ok_or_else(|| Error::Input(format!("metadata has no column `{column}`")))?;
        let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
        for (i, s) in samples.iter().enumerate() {
            let Some(row) = self.rows.get(s) else { continue };
            let raw = row[c].trim();
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                continue;
            }
            let label = match rule {
                Some(r) => match r.apply(raw) {
                    Some(l) => l,
                    None => continue,
                },
                None => raw.to_string(),
            };
            groups.entry(label).or_default().push(i);
        }
        Ok(groups.into_iter().collect())
    }

    pub fn samples(&self) -> &[String] {
        &self.order
    }
}

/// Two-way split of a numeric metadata column by a comparison, written like
/// `>=3` or `<0.5`.  Matching samples are labeled `"1"`, others `"0"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRule {
    op: CmpOp,
    threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl std::str::FromStr for GroupRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (op, rest) = [("<=", CmpOp::Le), (">=", CmpOp::Ge), ("!=", CmpOp::Ne), ("==", CmpOp::Eq), ("<", CmpOp::Lt), (">", CmpOp::Gt), ("=", CmpOp::Eq)]
            .iter()
            .find_map(|(p, op)| s.strip_prefix(p).map(|r| (*op, r)))
            .ok_or_else(|| Error::InvalidConfig(format!("binarize rule `{s}` must start with <, <=, >, >=, == or !=")))?;
        let threshold = rest
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("binarize threshold `{}` is not a number", rest.trim())))?;
        Ok(Self { op, threshold })
    }
}

impl GroupRule {
    /// Group label for a raw value; `None` when the value is not numeric.
    pub fn apply(&self, raw: &str) -> Option<String> {
        let x: f64 = raw.trim().parse().ok()?;
        let t = self.threshold;
        let hit = match self.op {
            CmpOp::Lt => x < t,
            CmpOp::Le => x <= t,
            CmpOp::Gt => x > t,
            CmpOp::Ge => x >= t,
            CmpOp::Eq => x == t,
            CmpOp::Ne => x != t,
        };
        Some(if hit { "1" } else { "0" }.to_string())
    }
}

fn read_table<R: BufRead>(reader: R) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut header = None;
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Input(e.to_string()))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<String> = line.split('\t').map(|c| c.trim().to_string()).collect();
        if header.is_none() {
            header = Some(cells);
        } else {
            rows.push(cells);
        }
    }
    let header = header.ok_or_else(|| Error::Input("empty table".into()))?;
    Ok((header, rows))
}
