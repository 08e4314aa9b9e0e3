use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N` stems of `D` samples each, stored row-major (one row per stem).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceArray {
    n_sources: usize,
    dim: usize,
    data: Vec<f64>,
}

impl SourceArray {
    pub fn zeros(n_sources: usize, dim: usize) -> Self {
        SourceArray {
            n_sources,
            dim,
            data: vec![0.0; n_sources * dim],
        }
    }

    pub fn from_vec(n_sources: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_sources == 0 || dim == 0 {
            return Err(Error::shape("non-empty (N, D)", format!("({n_sources}, {dim})")));
        }
        if data.len() != n_sources * dim {
            return Err(Error::shape(n_sources * dim, data.len()));
        }
        Ok(SourceArray {
            n_sources,
            dim,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("equal-length rows", "ragged rows"));
        }
        SourceArray::from_vec(rows.len(), dim, rows.concat())
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_sources, self.dim)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Sample-wise sum over stems, accumulated in index order.
    pub fn mixture(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for row in self.rows() {
            for (acc, v) in y.iter_mut().zip(row) {
                *acc += v;
            }
        }
        y
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, n_sources: usize, dim: usize) -> Result<()> {
        if self.shape() != (n_sources, dim) {
            return Err(Error::shape(
                format!("({n_sources}, {dim})"),
                format!("({}, {})", self.n_sources, self.dim),
            ));
        }
        Ok(())
    }

    /// Columns `start..start + len` of every row.
    pub fn window(&self, start: usize, len: usize) -> SourceArray {
        let mut out = SourceArray::zeros(self.n_sources, len);
        for n in 0..self.n_sources {
            out.row_mut(n).copy_from_slice(&self.row(n)[start..start + len]);
        }
        out
    }
}
