//! Dense 2D f64 matrices with the handful of kernels the network needs.
//!
//! Every kernel runs its loops in a fixed index order, so results are
//! bitwise reproducible across runs. Shapes are validated with asserts:
//! a shape mismatch is a programming error, not an input error.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "at least one row required");
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_data(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_data(self.rows, self.cols, data)
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_data(self.rows, self.cols, data)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Accumulates `other * c` into self. Shapes must match.
    pub fn add_scaled_in_place(&mut self, other: &Tensor, c: f64) {
        assert_eq!(self.shape(), other.shape(), "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * c;
        }
    }

    /// `self[m,k] · other[k,n]`, i-k-j loop order.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols,
            other.rows,
            "matmul inner dimension mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `self[m,k] · other[n,k]ᵀ → [m,n]` (row-by-row dot products).
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols,
            other.cols,
            "matmul_nt inner dimension mismatch: {:?} x {:?}ᵀ",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for kk in 0..k {
                    s += a_row[kk] * b_row[kk];
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    /// `self[k,m]ᵀ · other[k,n] → [m,n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.rows,
            other.rows,
            "matmul_tn inner dimension mismatch: {:?}ᵀ x {:?}",
            self.shape(),
            other.shape()
        );
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(m, n);
        for kk in 0..k {
            let a_row = &self.data[kk * m..(kk + 1) * m];
            let b_row = &other.data[kk * n..(kk + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
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

    /// Adds a `[1, cols]` row vector to every row.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Tensor {
        assert_eq!(row.rows, 1, "broadcast row must have one row");
        assert_eq!(row.cols, self.cols, "broadcast row width mismatch");
        let mut out = self.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += row.data[j];
            }
        }
        out
    }

    /// Adds a `[rows, 1]` column vector to every column.
    pub fn add_col_broadcast(&self, col: &Tensor) -> Tensor {
        assert_eq!(col.cols, 1, "broadcast column must have one column");
        assert_eq!(col.rows, self.rows, "broadcast column height mismatch");
        let mut out = self.clone();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] += col.data[i];
            }
        }
        out
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Row-wise log-softmax: `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&self) -> Tensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "nothing to concatenate");
        let cols = parts[0].cols;
        assert!(
            parts.iter().all(|p| p.cols == cols),
            "concat_rows width mismatch"
        );
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::from_data(rows, cols, data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "nothing to concatenate");
        let rows = parts[0].rows;
        assert!(
            parts.iter().all(|p| p.rows == rows),
            "concat_cols height mismatch"
        );
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.data[i * cols + offset..i * cols + offset + p.cols].copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.rows, "slice_rows out of range");
        Tensor::from_data(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(indices.len(), self.cols);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < self.rows, "gather_rows index {idx} out of range");
            out.row_mut(i).copy_from_slice(self.row(idx));
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_known_values() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(a.matmul(&b), t(&[vec![19.0, 22.0], vec![43.0, 50.0]]));
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = t(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]);
        let b = t(&[vec![2.0, 1.0, -1.0], vec![0.5, 0.0, 4.0]]);
        assert_eq!(a.matmul_nt(&b), a.matmul(&b.transpose()));
        let c = t(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 2.0]]);
        let d = t(&[vec![1.0], vec![2.0], vec![-1.0]]);
        assert_eq!(c.matmul_tn(&d), c.transpose().matmul(&d));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[vec![1.0, 2.0, 3.0], vec![-100.0, 0.0, 100.0]]);
        let y = x.softmax_rows();
        for i in 0..y.rows {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(y.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn log_softmax_exponentiates_to_softmax() {
        let x = t(&[vec![0.5, -1.0, 2.0]]);
        let lp = x.log_softmax_rows();
        let p = x.softmax_rows();
        for j in 0..x.cols {
            assert!((lp.get(0, j).exp() - p.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_extreme_inputs() {
        let x = t(&[vec![1e9, 1e9 - 1.0]]);
        let y = x.softmax_rows();
        assert!(!y.has_non_finite());
        assert!((y.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_adds() {
        let x = Tensor::zeros(2, 3);
        let row = t(&[vec![1.0, 2.0, 3.0]]);
        let y = x.add_row_broadcast(&row);
        assert_eq!(y.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(y.row(1), &[1.0, 2.0, 3.0]);
        let col = t(&[vec![10.0], vec![20.0]]);
        let z = y.add_col_broadcast(&col);
        assert_eq!(z.row(0), &[11.0, 12.0, 13.0]);
        assert_eq!(z.row(1), &[21.0, 22.0, 23.0]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t(&[vec![5.0, 6.0]]);
        let cat = Tensor::concat_rows(&[&a, &b]);
        assert_eq!(cat.slice_rows(0, 2), a);
        assert_eq!(cat.slice_rows(2, 1), b);
        let c = t(&[vec![1.0], vec![2.0]]);
        let d = t(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let wide = Tensor::concat_cols(&[&c, &d]);
        assert_eq!(wide.slice_cols(0, 1), c);
        assert_eq!(wide.slice_cols(1, 2), d);
    }

    #[test]
    fn transpose_is_involution() {
        let a = t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn gather_rows_picks_and_repeats() {
        let a = t(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]);
        let g = a.gather_rows(&[2, 0, 2]);
        assert_eq!(g, t(&[vec![3.0, 3.0], vec![1.0, 1.0], vec![3.0, 3.0]]));
    }

    #[test]
    fn randn_is_seeded() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let a = Tensor::randn(3, 4, 0.02, &mut r1);
        let b = Tensor::randn(3, 4, 0.02, &mut r2);
        assert_eq!(a, b);
    }
}
