//! Sample-by-category count matrices and their TSV representation.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples × categories matrix of nonnegative integer counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    sample_ids: Vec<String>,
    categories: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl CountTable {
    pub fn new(sample_ids: Vec<String>, categories: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if sample_ids.len() != counts.len() {
            return Err(Error::DimensionMismatch { expected: sample_ids.len(), found: counts.len() });
        }
        for row in &counts {
            if row.len() != categories.len() {
                return Err(Error::DimensionMismatch { expected: categories.len(), found: row.len() });
            }
        }
        check_unique(&sample_ids, "sample")?;
        check_unique(&categories, "category")?;
        Ok(Self { sample_ids, categories, counts })
    }

    /// Builds a table with generated identifiers `s0, s1, ...` and `c0, c1, ...`.
    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.first().map_or(0, Vec::len);
        let samples = (0..counts.len()).map(|i| format!("s{i}")).collect();
        let cats = (0..k).map(|j| format!("c{j}")).collect();
        Self::new(samples, cats, counts)
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn n_samples(&self) -> usize {
        self.counts.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_totals(&self) -> Vec<u64> {
        let mut tot = vec![0u64; self.n_categories()];
        for row in &self.counts {
            for (t, &x) in tot.iter_mut().zip(row) {
                *t += x;
            }
        }
        tot
    }

    pub fn grand_total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Rows at the given positions, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            sample_ids: idx.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            categories: self.categories.clone(),
            counts: idx.iter().map(|&i| self.counts[i].clone()).collect(),
        }
    }

    /// Rows whose identifiers appear in `ids`, in the order of `ids`.
    pub fn select_samples(&self, ids: &[String]) -> Result<Self> {
        let pos: HashMap<&str, usize> =
            self.sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let idx = ids
            .iter()
            .map(|s| pos.get(s.as_str()).copied().ok_or_else(|| Error::Input(format!("unknown sample `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_rows(&idx))
    }

    /// Column index by category name.
    pub fn category_index(&self) -> HashMap<&str, usize> {
        self.categories.iter().enumerate().map(|(j, c)| (c.as_str(), j)).collect()
    }

    /// Sums columns into groups; `assignment[j]` is the output column of input column `j`.
    pub fn merge_columns(&self, assignment: &[usize], names: Vec<String>) -> Result<Self> {
        if assignment.len() != self.n_categories() {
            return Err(Error::DimensionMismatch { expected: self.n_categories(), found: assignment.len() });
        }
        let counts = self
            .counts
            .iter()
            .map(|row| {
                let mut out = vec![0u64; names.len()];
                for (&g, &x) in assignment.iter().zip(row) {
                    out[g] += x;
                }
                out
            })
            .collect();
        Self::new(self.sample_ids.clone(), names, counts)
    }

    /// Mutable access for generators that perturb counts in place.
    pub fn rows_mut(&mut self) -> &mut [Vec<u64>] {
        &mut self.counts
    }

    /// Reads a tab-separated table.  The header's first cell is ignored; with
    /// `transpose` the rows are categories and the columns samples.
    pub fn read_tsv<R: BufRead>(reader: R, transpose: bool) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty() && !s.starts_with('#'),
            Err(_) => true,
        });
        let (_, header) = lines.next().ok_or_else(|| Error::Input("empty count table".into()))?;
        let header = header.map_err(|e| Error::Input(e.to_string()))?;
        let columns: Vec<String> = header.split('\t').skip(1).map(|s| s.trim().to_string()).collect();
        if columns.is_empty() {
            return Err(Error::Input("count table header has no data columns".into()));
        }
        let mut row_ids = Vec::new();
        let mut rows = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| Error::Input(e.to_string()))?;
            let mut cells = line.split('\t');
            let id = cells.next().unwrap_or_default().trim().to_string();
            let values = cells
                .map(|c| {
                    let c = c.trim();
                    c.parse::<u64>().or_else(|_| parse_integral_float(c)).map_err(|_| {
                        Error::Input(format!("line {}: `{c}` is not a nonnegative integer count", lineno + 1))
                    })
                })
                .collect::<Result<Vec<u64>>>()?;
            if values.len() != columns.len() {
                return Err(Error::Input(format!(
                    "line {}: expected {} counts, found {}",
                    lineno + 1,
                    columns.len(),
                    values.len()
                )));
            }
            row_ids.push(id);
            rows.push(values);
        }
        if transpose {
            let n = columns.len();
            let mut t = vec![vec![0u64; rows.len()]; n];
            for (j, row) in rows.iter().enumerate() {
                for (i, &x) in row.iter().enumerate() {
                    t[i][j] = x;
                }
            }
            Self::new(columns, row_ids, t)
        } else {
            Self::new(row_ids, columns, rows)
        }
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "sample_id")?;
        for c in &self.categories {
            write!(out, "\t{c}")?;
        }
        writeln!(out)?;
        for (id, row) in self.sample_ids.iter().zip(&self.counts) {
            write!(out, "{id}")?;
            for x in row {
                write!(out, "\t{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn parse_integral_float(s: &str) -> std::result::Result<u64, ()> {
    let v: f64 = s.parse().map_err(|_| ())?;
    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
        Ok(v as u64)
    } else {
        Err(())
    }
}

fn check_unique(names: &[String], what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(names.len());
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Input(format!("duplicate {what} identifier `{n}`")));
        }
    }
    Ok(())
}
