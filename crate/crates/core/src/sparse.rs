//! Compressed sparse row storage for the scalar Laplacian and the 3×3
//! block operators used by the ARAP Hessian.

use nalgebra::{DMatrix, Matrix3, Vector3};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// columns within a row are sorted.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            rows[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                match indices.last() {
                    Some(&last) if last == c && indices.len() > *indptr.last().unwrap() => {
                        *values.last_mut().unwrap() += v;
                    }
                    _ => {
                        indices.push(c);
                        values.push(v);
                    }
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// Applies `self ⊗ I₃` to a vertex-major field of length `3 * ncols`.
    pub fn kron_i3_mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), 3 * self.ncols);
        let mut out = vec![0.0; 3 * self.nrows];
        for r in 0..self.nrows {
            let mut acc = Vector3::zeros();
            for (c, v) in self.row(r) {
                acc += v * Vector3::new(x[3 * c], x[3 * c + 1], x[3 * c + 2]);
            }
            out[3 * r..3 * r + 3].copy_from_slice(acc.as_slice());
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

/// Square block-sparse matrix of 3×3 blocks in row-major block order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCsr3 {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    blocks: Vec<Matrix3<f64>>,
}

impl BlockCsr3 {
    /// `rows[i]` holds the `(column, block)` pairs of block row `i`, sorted by column.
    pub fn from_rows(rows: Vec<Vec<(usize, Matrix3<f64>)>>) -> Self {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut blocks = Vec::new();
        indptr.push(0);
        for row in rows {
            for (c, b) in row {
                indices.push(c);
                blocks.push(b);
            }
            indptr.push(indices.len());
        }
        Self {
            n,
            indptr,
            indices,
            blocks,
        }
    }

    pub fn block_rows(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, &Matrix3<f64>)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.blocks[span].iter())
    }

    pub fn block(&self, r: usize, c: usize) -> Option<&Matrix3<f64>> {
        self.row(r).find(|&(j, _)| j == c).map(|(_, b)| b)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), 3 * self.n);
        let mut out = vec![0.0; 3 * self.n];
        for r in 0..self.n {
            let mut acc = Vector3::zeros();
            for (c, b) in self.row(r) {
                acc += b * Vector3::new(x[3 * c], x[3 * c + 1], x[3 * c + 2]);
            }
            out[3 * r..3 * r + 3].copy_from_slice(acc.as_slice());
        }
        out
    }

    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), 3 * self.n);
        let mut out = vec![0.0; 3 * self.n];
        for r in 0..self.n {
            let xr = Vector3::new(x[3 * r], x[3 * r + 1], x[3 * r + 2]);
            for (c, b) in self.row(r) {
                let y = b.transpose() * xr;
                out[3 * c] += y.x;
                out[3 * c + 1] += y.y;
                out[3 * c + 2] += y.z;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(3 * self.n, 3 * self.n);
        for r in 0..self.n {
            for (c, b) in self.row(r) {
                for i in 0..3 {
                    for j in 0..3 {
                        m[(3 * r + i, 3 * c + j)] += b[(i, j)];
                    }
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0), (0, 0, 4.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.mul_vec(&[1.0, 1.0]), vec![7.0, -1.0]);
    }

    #[test]
    fn block_transpose_matches_dense() {
        let a = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
        let b = Matrix3::identity() * 2.0;
        let m = BlockCsr3::from_rows(vec![vec![(0, a), (1, b)], vec![(1, a.transpose())]]);
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let dense = m.to_dense();
        let expect = dense.transpose() * nalgebra::DVector::from_column_slice(&x);
        let got = m.transpose_mul_vec(&x);
        for i in 0..6 {
            assert!((expect[i] - got[i]).abs() < 1e-14);
        }
    }
}
