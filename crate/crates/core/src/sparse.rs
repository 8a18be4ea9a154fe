//! Compressed sparse row storage for the Hamiltonians driving the
//! integrators. Dense construction stays in [`crate::hilbert`]; this is the
//! fast path for repeated matrix-vector and matrix-matrix products.

use alloc::vec::Vec;

use crate::{CMatrix, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl Csr {
    /// Entries with `|x| <= drop_tol` are omitted.
    pub fn from_dense(m: &CMatrix, drop_tol: f64) -> Csr {
        let dim = m.nrows();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..dim {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v.norm() > drop_tol {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { dim, row_ptr, cols, vals }
    }

    /// `a + g·b` on the union pattern of two matrices with the same shape.
    pub fn linear_combination(a: &CMatrix, b: &CMatrix, g: f64, drop_tol: f64) -> Csr {
        let combined = a + b * C64::new(g, 0.0);
        let dim = a.nrows();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..dim {
            for c in 0..dim {
                if a[(r, c)].norm() > drop_tol || b[(r, c)].norm() > drop_tol {
                    cols.push(c);
                    vals.push(combined[(r, c)]);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { dim, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Positions of row `r` in the value storage.
    #[inline]
    pub fn row_range(&self, r: usize) -> core::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row_slices(&self, r: usize) -> (&[usize], &[C64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.vals[span])
    }

    /// Real parts of the stored values if every imaginary part is zero.
    pub fn real_values(&self) -> Option<Vec<f64>> {
        self.vals.iter().all(|v| v.im == 0.0).then(|| self.vals.iter().map(|v| v.re).collect())
    }

    /// `out = (self - shift·I) x`.
    pub fn mul_vec_shifted(&self, x: &[C64], shift: f64, out: &mut [C64]) {
        for r in 0..self.dim {
            let mut acc = x[r] * (-shift);
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            out[r] = acc;
        }
    }

    /// Relabel rows and columns: entry `(r, c)` moves to `(pos[r], pos[c])`.
    pub fn permuted(&self, pos: &[usize]) -> Csr {
        let mut inverse = alloc::vec![0; self.dim];
        for (old, &new) in pos.iter().enumerate() {
            inverse[new] = old;
        }
        let mut row_ptr = Vec::with_capacity(self.dim + 1);
        let mut cols = Vec::with_capacity(self.nnz());
        let mut vals = Vec::with_capacity(self.nnz());
        row_ptr.push(0);
        for new_r in 0..self.dim {
            let mut entries: Vec<(usize, C64)> = self.row(inverse[new_r]).map(|(c, v)| (pos[c], v)).collect();
            entries.sort_by_key(|e| e.0);
            for (c, v) in entries {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Csr { dim: self.dim, row_ptr, cols, vals }
    }

    pub fn to_dense(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }
}
