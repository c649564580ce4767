//! In-memory data matrices for continuous and binary observations.

use crate::error::{Error, Result};

/// Row-major N x D matrix of continuous observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    n: usize,
    dim: usize,
    values: Vec<f64>,
}

impl DataSet {
    pub fn new(n: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} values for a {n}x{dim} matrix, got {}",
                n * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "data contains non-finite values".into(),
            ));
        }
        Ok(Self { n, dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("ragged data rows".into()));
        }
        Self::new(n, dim, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim.max(1))
    }
}

/// Row-major N x D matrix of binary observations; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryData {
    n: usize,
    dim: usize,
    values: Vec<Option<bool>>,
}

impl BinaryData {
    pub fn new(n: usize, dim: usize, values: Vec<Option<bool>>) -> Result<Self> {
        if values.len() != n * dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} cells for a {n}x{dim} matrix, got {}",
                n * dim,
                values.len()
            )));
        }
        Ok(Self { n, dim, values })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, d: usize) -> Option<bool> {
        self.values[i * self.dim + d]
    }

    pub fn row(&self, i: usize) -> &[Option<bool>] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}
