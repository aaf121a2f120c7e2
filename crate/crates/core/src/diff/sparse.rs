use std::fmt::Write as _;

use crate::error::{contract, Error, Result};

/// Compressed sparse row matrix with unique `(row, col)` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate positions
    /// and out-of-range indices are rejected.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            if r >= rows || c >= cols {
                return contract(
                    "sparse",
                    format!("entry ({r}, {c}) outside {rows}x{cols} matrix"),
                );
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return contract(
                    "sparse",
                    format!("duplicate entry ({}, {})", pair[0].0, pair[0].1),
                );
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        for &(r, _, _) in &entries {
            indptr[r + 1] += 1;
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices: entries.iter().map(|e| e.1).collect(),
            values: entries.iter().map(|e| e.2).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored entries of row `r` as `(col, value)`.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.rows)
            .flat_map(|r| self.row_entries(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row_entries(r)
            .find(|&(col, _)| col == c)
            .map_or(0.0, |(_, v)| v)
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(
            self.cols,
            self.rows,
            self.triplets().into_iter().map(|(r, c, v)| (c, r, v)),
        )
        .expect("transpose of a valid matrix is valid")
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Entrywise sum; structural zeros produced by cancellation are kept.
    pub fn add(&self, other: &SparseMatrix) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return contract(
                "sparse_add",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            );
        }
        let mut merged = std::collections::BTreeMap::new();
        for (r, c, v) in self.triplets().into_iter().chain(other.triplets()) {
            *merged.entry((r, c)).or_insert(0.0) += v;
        }
        Self::from_triplets(
            self.rows,
            self.cols,
            merged.into_iter().map(|((r, c), v)| (r, c, v)),
        )
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && self
                .triplets()
                .iter()
                .all(|&(r, c, v)| (self.get(c, r) - v).abs() <= tol)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.cols]; self.rows];
        for (r, c, v) in self.triplets() {
            out[r][c] = v;
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row_entries(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `self * x` for a row-major dense `x` with `width` columns.
    pub fn matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row_entries(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// `self^T * x` without materializing the transpose.
    pub fn transpose_matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * width];
        for r in 0..self.rows {
            let src = &x[r * width..(r + 1) * width];
            for (c, v) in self.row_entries(r) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// Serializes to the sparse-triplet text format:
    ///
    /// ```text
    /// sparse <rows> <cols> <nnz>
    /// <row> <col> <value>
    /// ...
    /// ```
    ///
    /// Indices are 0-based; values use the shortest exact decimal form.
    pub fn to_triplet_text(&self) -> String {
        let mut out = format!("sparse {} {} {}\n", self.rows, self.cols, self.nnz());
        for (r, c, v) in self.triplets() {
            let _ = writeln!(out, "{r} {c} {v:?}");
        }
        out
    }

    pub fn from_triplet_text(text: &str) -> Result<Self> {
        let mut offset = 0usize;
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().ok_or(Error::Parse {
            offset: 0,
            detail: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "sparse" {
            return Err(Error::Parse {
                offset: 0,
                detail: "expected `sparse <rows> <cols> <nnz>`".into(),
            });
        }
        let num = |s: &str, at: usize| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                offset: at,
                detail: format!("invalid integer `{s}`"),
            })
        };
        let rows = num(fields[1], 0)?;
        let cols = num(fields[2], 0)?;
        let nnz = num(fields[3], 0)?;
        offset += header.len();
        let mut triplets = Vec::with_capacity(nnz);
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                offset += line.len();
                continue;
            }
            if f.len() != 3 {
                return Err(Error::Parse {
                    offset,
                    detail: "expected `<row> <col> <value>`".into(),
                });
            }
            let v = f[2].parse::<f64>().map_err(|_| Error::Parse {
                offset,
                detail: format!("invalid value `{}`", f[2]),
            })?;
            triplets.push((num(f[0], offset)?, num(f[1], offset)?, v));
            offset += line.len();
        }
        if triplets.len() != nnz {
            return Err(Error::Parse {
                offset,
                detail: format!("header declares {nnz} entries, found {}", triplets.len()),
            });
        }
        Self::from_triplets(rows, cols, triplets)
    }
}
