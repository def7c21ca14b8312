//! Dense row-major matrix with `f64`-accumulated reductions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;

/// Dense row-major matrix.
///
/// Indexing is `(row, col)`. All reductions — matrix products, row sums —
/// accumulate in `f64` regardless of the storage type `S`, then round once
/// on write-back. Shape mismatches are reported as [`Error::Shape`] with the
/// calling context, never panics, so a bad wiring in a model surfaces as a
/// readable error in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S: Scalar = f32> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    /// Build from a row-major vector. Errors if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested row slices (test convenience).
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} of width {n_cols}"),
                    format!("{}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Matrix {
            rows: n_rows,
            cols: n_cols,
            data,
        }
        .into_ok()
    }

    fn into_ok(self) -> Result<Self> {
        Ok(self)
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::ONE);
        }
        m
    }

    /// Matrix filled with i.i.d. `N(0, std^2)` entries drawn from `rng`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64(z * std)
            })
            .collect();
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> S {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: S) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = v;
    }

    /// Borrow one row as a slice.
    #[inline]
    pub fn row(&self, row: usize) -> &[S] {
        debug_assert!(row < self.rows);
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Borrow one row mutably.
    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [S] {
        debug_assert!(row < self.rows);
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Copy a slice into a row. Errors on width mismatch.
    pub fn set_row(&mut self, row: usize, values: &[S]) -> Result<()> {
        if values.len() != self.cols {
            return Err(Error::shape(
                "Matrix::set_row",
                format!("{}", self.cols),
                format!("{}", values.len()),
            ));
        }
        self.row_mut(row).copy_from_slice(values);
        Ok(())
    }

    /// `self * other`, `(m x k) * (k x n) -> (m x n)`.
    ///
    /// Inner products accumulate in `f64`.
    pub fn matmul(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "Matrix::matmul",
                format!("inner dims to agree ({}x{} * ?x?)", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let (m, n) = (self.rows, other.cols);
        let mut out = Matrix::zeros(m, n);
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let a_row = self.row(i);
            for (kk, &a) in a_row.iter().enumerate() {
                let a = a.to_f64();
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(kk);
                for (j, &b) in b_row.iter().enumerate() {
                    acc[j] += a * b.to_f64();
                }
            }
            let out_row = out.row_mut(i);
            for (o, &a) in out_row.iter_mut().zip(acc.iter()) {
                *o = S::from_f64(a);
            }
        }
        Ok(out)
    }

    /// `self * other^T`, `(m x k) * (n x k)^T -> (m x n)`.
    ///
    /// Both operands are walked along contiguous rows, which makes this the
    /// cheapest way to form a score matrix between two sets of row vectors.
    pub fn matmul_a_bt(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "Matrix::matmul_a_bt",
                format!("shared width {}", self.cols),
                format!("{}", other.cols),
            ));
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                let mut acc = 0f64;
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a.to_f64() * b.to_f64();
                }
                *o = S::from_f64(acc);
            }
        }
        Ok(out)
    }

    /// `self^T * other`, `(m x k)^T * (m x n) -> (k x n)`.
    ///
    /// Accumulates the whole result in an `f64` buffer and rounds once.
    pub fn matmul_at_b(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "Matrix::matmul_at_b",
                format!("shared height {}", self.rows),
                format!("{}", other.rows),
            ));
        }
        let (k, n) = (self.cols, other.cols);
        let mut acc = vec![0f64; k * n];
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (kk, &a) in a_row.iter().enumerate() {
                let a = a.to_f64();
                if a == 0.0 {
                    continue;
                }
                let dst = &mut acc[kk * n..(kk + 1) * n];
                for (d, &b) in dst.iter_mut().zip(b_row.iter()) {
                    *d += a * b.to_f64();
                }
            }
        }
        let mut out = Matrix::zeros(k, n);
        for (o, &a) in out.data.iter_mut().zip(acc.iter()) {
            *o = S::from_f64(a);
        }
        Ok(out)
    }

    /// Transpose.
    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Elementwise sum; errors on shape mismatch.
    pub fn add(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        self.check_same_shape("Matrix::add", other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += other` in place; errors on shape mismatch.
    pub fn add_assign(&mut self, other: &Matrix<S>) -> Result<()> {
        self.check_same_shape("Matrix::add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Add a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, row: &[S]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(
                "Matrix::add_row_broadcast",
                format!("{}", self.cols),
                format!("{}", row.len()),
            ));
        }
        for r in 0..self.rows {
            for (a, &b) in self.row_mut(r).iter_mut().zip(row.iter()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Multiply every entry by a scalar, in place.
    pub fn scale(&mut self, factor: S) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    /// Column sums, accumulated in `f64`, as a `Vec` of length `cols`.
    pub fn col_sums(&self) -> Vec<S> {
        let mut acc = vec![0f64; self.cols];
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(r).iter()) {
                *a += v.to_f64();
            }
        }
        acc.into_iter().map(S::from_f64).collect()
    }

    /// Extract a contiguous block of columns as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Result<Matrix<S>> {
        if start + width > self.cols {
            return Err(Error::shape(
                "Matrix::col_block",
                format!("cols {start}..{} within width {}", start + width, self.cols),
                "out of range".to_string(),
            ));
        }
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(out)
    }

    /// Write a block of columns from `block` starting at column `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix<S>) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::shape(
                "Matrix::set_col_block",
                format!("{} rows, cols ending <= {}", self.rows, self.cols),
                format!("{}x{} at col {start}", block.rows, block.cols),
            ));
        }
        for r in 0..self.rows {
            self.data[r * self.cols + start..r * self.cols + start + block.cols]
                .copy_from_slice(block.row(r));
        }
        Ok(())
    }

    /// Error unless every entry is finite. `context` names the tensor in the
    /// error message.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite(context.to_string()));
            }
        }
        Ok(())
    }

    /// Largest absolute entry, in `f64`.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Convert storage precision (used by the gradient checker's reference
    /// mode and by checkpoint IO, which is always `f32` on disk).
    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    fn check_same_shape(&self, context: &str, other: &Matrix<S>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}
