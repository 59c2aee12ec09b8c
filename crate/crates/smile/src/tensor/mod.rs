//! Dense 2-D tensors, a sparse CSR matrix for graph propagation, and a
//! reverse-mode tape over them.
//!
//! Scalars are 1x1 tensors and vectors are 1xn or nx1; everything is stored
//! row-major in double precision.

mod adam;
mod tape;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, TensorRef};

use crate::error::{Result, SmileError};
use rayon::prelude::*;

/// Work threshold (multiply-adds) above which matrix products parallelize
/// over output rows. Per-element results are identical either way.
const PAR_FLOPS: usize = 1 << 17;

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(SmileError::Config(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * c);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != c {
                return Err(SmileError::Config(format!(
                    "row {i} has length {} but row 0 has length {c}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor { rows: n, cols: c, data })
    }

    /// Identity matrix of side n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// First non-finite entry, if any, as a (row, col, value) triple.
    pub fn first_non_finite(&self) -> Option<(usize, usize, f64)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| (k / self.cols, k % self.cols, self.data[k]))
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// self @ other.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(SmileError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        let body = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (l, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * n..(l + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_FLOPS {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        Ok(out)
    }

    /// self @ otherᵀ without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(SmileError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(m, n);
        let body = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum();
            }
        };
        if m * k * n >= PAR_FLOPS {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        Ok(out)
    }

    /// selfᵀ @ other without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(SmileError::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Tensor::zeros(m, n);
        let body = |(i, out_row): (usize, &mut [f64])| {
            for l in 0..k {
                let a = self.data[l * m + i];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * n..(l + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_FLOPS {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        Ok(out)
    }

    /// Column sums as a 1xn tensor.
    pub fn col_sum(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Row sums as an nx1 tensor.
    pub fn row_sum(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, 1);
        for i in 0..self.rows {
            out.data[i] = self.row(i).iter().sum();
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Sparse matrix in compressed-sparse-row form. Used for the normalized
/// graph propagation matrix; it participates in the tape as a constant.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets; triplets must not repeat.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(SmileError::Config(format!(
                    "triplet ({r}, {c}) out of bounds for {n_rows}x{n_cols}"
                )));
            }
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts;
        let nnz = triplets.len();
        let mut col_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut cursor = row_ptr.clone();
        let mut sorted: Vec<&(usize, usize, f64)> = triplets.iter().collect();
        sorted.sort_by_key(|t| (t.0, t.1));
        for &(r, c, v) in sorted {
            let k = cursor[r];
            col_idx[k] = c;
            values[k] = v;
            cursor[r] += 1;
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// self @ dense.
    pub fn matmul_dense(&self, dense: &Tensor) -> Result<Tensor> {
        if self.n_cols != dense.rows() {
            return Err(SmileError::ShapeMismatch {
                op: "spmm",
                left: self.shape(),
                right: dense.shape(),
            });
        }
        let n = dense.cols();
        let mut out = Tensor::zeros(self.n_rows, n);
        let body = |(i, out_row): (usize, &mut [f64])| {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.values[k];
                let d_row = dense.row(self.col_idx[k]);
                for (o, &d) in out_row.iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        };
        if self.nnz() * n >= PAR_FLOPS {
            out.data.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(body);
        }
        Ok(out)
    }

    /// selfᵀ @ dense (scatter form, serial).
    pub fn matmul_dense_transposed(&self, dense: &Tensor) -> Result<Tensor> {
        if self.n_rows != dense.rows() {
            return Err(SmileError::ShapeMismatch {
                op: "spmm_t",
                left: (self.n_cols, self.n_rows),
                right: dense.shape(),
            });
        }
        let n = dense.cols();
        let mut out = Tensor::zeros(self.n_cols, n);
        for i in 0..self.n_rows {
            let d_row = dense.row(i);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.values[k];
                let c = self.col_idx[k];
                let out_row = &mut out.data[c * n..(c + 1) * n];
                for (o, &d) in out_row.iter_mut().zip(d_row) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }

    /// Densify (used for batch sub-blocks and tests).
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for (j, v) in self.row_entries(i) {
                out.set(i, j, v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_tensor(&mut rng, 3, 3);
        let out = Tensor::eye(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, 4, 6);
        let b = random_tensor(&mut rng, 6, 5);
        let ab = a.matmul(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        let tn = a.transpose().matmul_tn(&b).unwrap();
        for k in 0..ab.len() {
            assert_abs_diff_eq!(ab.data()[k], nt.data()[k], epsilon = 1e-12);
            assert_abs_diff_eq!(ab.data()[k], tn.data()[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)") && err.contains("(4, 2)"), "{err}");
    }

    #[test]
    fn csr_matches_dense_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut triplets = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                if rng.gen_bool(0.3) {
                    triplets.push((i, j, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        let sp = CsrMatrix::from_triplets(8, 8, &triplets).unwrap();
        let x = random_tensor(&mut rng, 8, 4);
        let sparse_out = sp.matmul_dense(&x).unwrap();
        let dense_out = sp.to_dense().matmul(&x).unwrap();
        for k in 0..sparse_out.len() {
            assert_abs_diff_eq!(sparse_out.data()[k], dense_out.data()[k], epsilon = 1e-12);
        }
        let t_out = sp.matmul_dense_transposed(&x).unwrap();
        let t_dense = sp.to_dense().transpose().matmul(&x).unwrap();
        for k in 0..t_out.len() {
            assert_abs_diff_eq!(t_out.data()[k], t_dense.data()[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn parallel_matmul_is_bit_identical_to_serial() {
        // Same inputs large enough to cross the parallel threshold must give
        // bitwise-equal results (each output element has a fixed evaluation
        // order regardless of threading).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&mut rng, 128, 64);
        let b = random_tensor(&mut rng, 64, 96);
        let c1 = a.matmul(&b).unwrap();
        let c2 = a.matmul(&b).unwrap();
        assert!(c1
            .data()
            .iter()
            .zip(c2.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
