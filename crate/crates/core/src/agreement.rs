//! Krippendorff's alpha for nominal data.
//!
//! Values are pooled into a coincidence matrix: every item coded by `m ≥ 2`
//! annotators contributes each ordered pair of its codes (taken from distinct
//! annotators) with weight `1 / (m - 1)`. Items with fewer than two codes are
//! not pairable and contribute nothing.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Items × annotators table of category indices, `None` for missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReliabilityMatrix {
    categories: Vec<String>,
    values: Vec<Vec<Option<usize>>>,
}

impl ReliabilityMatrix {
    /// Builds a matrix from string codes. Categories are the sorted set of
    /// distinct codes.
    pub fn from_rows<S: AsRef<str>>(rows: &[Vec<Option<S>>]) -> Result<Self> {
        let categories: Vec<String> = rows
            .iter()
            .flatten()
            .flatten()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let values = rows
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| {
                        v.as_ref().map(|s| {
                            categories
                                .binary_search_by(|c| c.as_str().cmp(s.as_ref()))
                                .expect("category collected above")
                        })
                    })
                    .collect()
            })
            .collect();
        let m = Self { categories, values };
        m.validate()?;
        Ok(m)
    }

    /// Builds a matrix from integer codes `0..n_categories`.
    pub fn from_codes(n_categories: usize, values: Vec<Vec<Option<usize>>>) -> Result<Self> {
        if let Some(bad) = values.iter().flatten().flatten().find(|&&c| c >= n_categories) {
            return Err(Error::Config(format!(
                "code {bad} outside {n_categories} categories"
            )));
        }
        let m = Self {
            categories: (0..n_categories).map(|c| c.to_string()).collect(),
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// CSV with one row per item and one column per annotator; an empty cell
    /// is a missing code.
    pub fn from_csv_reader<R: Read>(reader: R, header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(header)
            .flexible(false)
            .from_reader(reader);
        let mut rows: Vec<Vec<Option<String>>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse(format!("csv: {e}")))?;
            rows.push(
                rec.iter()
                    .map(|cell| {
                        let cell = cell.trim();
                        (!cell.is_empty()).then(|| cell.to_string())
                    })
                    .collect(),
            );
        }
        Self::from_rows(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, header: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, header)
    }

    fn validate(&self) -> Result<()> {
        let annotators = self.values.first().map_or(0, Vec::len);
        if annotators < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 annotators, got {annotators}"
            )));
        }
        if self.values.iter().any(|r| r.len() != annotators) {
            return Err(Error::Shape("rows have differing annotator counts".into()));
        }
        if !self.values.iter().any(|r| r.iter().flatten().count() >= 2) {
            return Err(Error::InsufficientData(
                "no item has two or more codes".into(),
            ));
        }
        Ok(())
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn items(&self) -> &[Vec<Option<usize>>] {
        &self.values
    }

    pub fn n_items(&self) -> usize {
        self.values.len()
    }

    pub fn n_annotators(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

/// Symmetric coincidence matrix with its marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct Coincidences {
    pub o: Vec<Vec<f64>>,
    pub marginals: Vec<f64>,
    pub total: f64,
}

pub fn coincidence_matrix(m: &ReliabilityMatrix) -> Result<Coincidences> {
    let k = m.categories.len();
    let mut o = vec![vec![0.0; k]; k];
    let mut counts = vec![0usize; k];
    let mut pairable = false;
    for item in &m.values {
        let codes: Vec<usize> = item.iter().flatten().copied().collect();
        let mu = codes.len();
        if mu < 2 {
            continue;
        }
        pairable = true;
        counts.iter_mut().for_each(|c| *c = 0);
        for &c in &codes {
            counts[c] += 1;
        }
        let w = 1.0 / (mu - 1) as f64;
        // ordered pairs of distinct positions: n_c·n_k for c≠k, n_c·(n_c−1) on the diagonal
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for kk in 0..k {
                let pairs = if c == kk {
                    counts[c] * (counts[c] - 1)
                } else {
                    counts[c] * counts[kk]
                };
                o[c][kk] += pairs as f64 * w;
            }
        }
    }
    if !pairable {
        return Err(Error::InsufficientData("no pairable item".into()));
    }
    let marginals: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let total = marginals.iter().sum();
    Ok(Coincidences {
        o,
        marginals,
        total,
    })
}

/// Nominal-metric alpha, `1 - D_o / D_e`.
pub fn krippendorff_alpha(m: &ReliabilityMatrix) -> Result<f64> {
    let co = coincidence_matrix(m)?;
    let n = co.total;
    let k = co.marginals.len();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for kk in 0..k {
            if c != kk {
                observed += co.o[c][kk];
                expected += co.marginals[c] * co.marginals[kk];
            }
        }
    }
    let d_o = observed / n;
    let d_e = expected / (n * (n - 1.0));
    if d_e == 0.0 {
        return Err(Error::UndefinedAlpha);
    }
    Ok(1.0 - d_o / d_e)
}
