//! Adapter for contextual vectors produced outside this crate.
//!
//! File layout: a header line `n d`, then `n` lines of `d` whitespace-separated
//! numbers, one per token position.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalEmbeddings {
    pub vectors: Matrix,
}

impl ExternalEmbeddings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("external embeddings: missing `n d` header".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("external embeddings header: {e}")))?;
        let [n, d] = dims[..] else {
            return Err(Error::Parse(format!(
                "external embeddings header must be `n d`, got `{header}`"
            )));
        };
        let mut data = Vec::with_capacity(n * d);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("external embeddings row {}: {e}", i + 1)))?;
            if row.len() != d {
                return Err(Error::Shape(format!(
                    "external embeddings row {} has {} values, expected {d}",
                    i + 1,
                    row.len()
                )));
            }
            data.extend(row);
            rows += 1;
        }
        if rows != n {
            return Err(Error::Shape(format!(
                "external embeddings header declares {n} rows, found {rows}"
            )));
        }
        Ok(Self {
            vectors: Matrix::from_vec(n, d, data),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.vectors.rows(), self.vectors.cols());
        for r in 0..self.vectors.rows() {
            let row: Vec<String> = self.vectors.row(r).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "2 3\n0.5 1 -2\n3e-1 0 4.25\n";
        let e = ExternalEmbeddings::parse(text).unwrap();
        assert_eq!(e.vectors.shape(), (2, 3));
        assert_eq!(e.vectors.row(1), &[0.3, 0.0, 4.25]);
        assert_eq!(ExternalEmbeddings::parse(&e.to_text()).unwrap(), e);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ExternalEmbeddings::parse("2 2\n1 2\n").is_err());
        assert!(ExternalEmbeddings::parse("1 2\n1 2 3\n").is_err());
        assert!(ExternalEmbeddings::parse("1\n1\n").is_err());
        assert!(ExternalEmbeddings::parse("").is_err());
    }
}
