use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row (column, value) lists; explicit zeros are dropped.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in &rows {
            for &(c, v) in row {
                debug_assert!((c as usize) < n_cols);
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        SparseMatrix { n_rows: rows.len(), n_cols, indptr, indices, values }
    }

    pub fn empty(n_rows: usize) -> Self {
        SparseMatrix { n_rows, n_cols: 0, indptr: vec![0; n_rows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_dot(&self, r: usize, v: &[f64]) -> f64 {
        let (idx, val) = self.row(r);
        idx.iter().zip(val).map(|(&c, &x)| x * v[c as usize]).sum()
    }

    /// `x_rᵀ M x_r` for a dense symmetric `M`.
    pub fn row_quad(&self, r: usize, m: &DMatrix<f64>) -> f64 {
        let (idx, val) = self.row(r);
        let mut acc = 0.0;
        for (a, (&i, &xi)) in idx.iter().zip(val).enumerate() {
            acc += xi * xi * m[(i as usize, i as usize)];
            for (&j, &xj) in idx[a + 1..].iter().zip(&val[a + 1..]) {
                acc += 2.0 * xi * xj * m[(i as usize, j as usize)];
            }
        }
        acc
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row_dot(r, v)).collect()
    }

    /// `Xᵀ v`.
    pub fn t_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for r in 0..self.n_rows {
            let (idx, val) = self.row(r);
            for (&c, &x) in idx.iter().zip(val) {
                out[c as usize] += x * v[r];
            }
        }
        out
    }

    /// `Xᵀ diag(w) X` as a dense matrix.
    pub fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_cols, self.n_cols);
        for r in 0..self.n_rows {
            let (idx, val) = self.row(r);
            for (&i, &xi) in idx.iter().zip(val) {
                for (&j, &xj) in idx.iter().zip(val) {
                    out[(i as usize, j as usize)] += w[r] * xi * xj;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (idx, val) = self.row(r);
            for (&c, &x) in idx.iter().zip(val) {
                out[(r, c as usize)] += x;
            }
        }
        out
    }

    /// Writes a Matrix Market coordinate file (1-based indices).
    pub fn write_matrix_market(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "%%MatrixMarket matrix coordinate real general").map_err(io)?;
        writeln!(w, "{} {} {}", self.n_rows, self.n_cols, self.nnz()).map_err(io)?;
        for r in 0..self.n_rows {
            let (idx, val) = self.row(r);
            for (&c, &x) in idx.iter().zip(val) {
                writeln!(w, "{} {} {}", r + 1, c + 1, x).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}
