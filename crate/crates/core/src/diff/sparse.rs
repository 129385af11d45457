//! Compressed sparse row matrices and their products with dense matrices.

use crate::diff::Matrix;
use crate::error::{Error, Result};

/// Sparse matrix in compressed row layout with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|(r, c, _)| *r >= rows || *c >= cols) {
            return Err(Error::Dimension {
                op: "csr_from_triplets",
                left: (rows, cols),
                right: (r, c),
            });
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            offsets[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    /// CSR copy of the nonzero entries of a dense matrix.
    pub fn from_dense(m: &Matrix) -> Self {
        let mut offsets = Vec::with_capacity(m.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            offsets,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Entry lookup by binary search within the row.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |p| vals[p])
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                m.set(r, c, v);
            }
        }
        m
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rows, "permutation length");
        let mut offsets = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        offsets.push(0);
        for &src in perm {
            let (idx, vals) = self.row(src);
            indices.extend_from_slice(idx);
            values.extend_from_slice(vals);
            offsets.push(indices.len());
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            offsets,
            indices,
            values,
        }
    }

    /// Same sparsity pattern with values replaced entry-wise.
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    /// Drops structurally stored zeros.
    pub fn pruned(&self) -> Self {
        let mut offsets = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        offsets.push(0);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            offsets,
            indices,
            values,
        }
    }

    /// Dense product `self * x`.
    pub fn spmm(&self, x: &Matrix) -> Result<Matrix> {
        if self.cols != x.rows() {
            return Err(Error::Dimension {
                op: "spmm",
                left: self.shape(),
                right: x.shape(),
            });
        }
        let n = x.cols();
        let mut out = Matrix::zeros(self.rows, n);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let dst = out.row_mut(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (d, s) in dst.iter_mut().zip(x.row(c)) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// Dense product `self^T * g`.
    pub fn spmm_transposed(&self, g: &Matrix) -> Result<Matrix> {
        if self.rows != g.rows() {
            return Err(Error::Dimension {
                op: "spmm_transposed",
                left: (self.cols, self.rows),
                right: g.shape(),
            });
        }
        let n = g.cols();
        let mut out = Matrix::zeros(self.cols, n);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let src = g.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (d, s) in out.row_mut(c).iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// Structural and numerical symmetry within `tol`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        (0..self.rows).all(|r| {
            let (idx, vals) = self.row(r);
            idx.iter()
                .zip(vals)
                .all(|(&c, &v)| (self.get(c, r) - v).abs() <= tol)
        })
    }
}
