use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use super::TensorError;

/// Scalar type the kernel is generic over. `f64` is used for gradient
/// verification, `f32` for training runs.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor2D<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor2D[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl<T: Real> Tensor2D<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.set(i, i, T::one());
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::DataLength {
                rows: rows.len(),
                cols,
                len: bad.len(),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: Vec<T>) -> Result<Self, TensorError> {
        Self::from_vec(1, values.len(), values)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor2D<U> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.rows != rhs.rows {
            return Err(TensorError::shape("t_matmul", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = self.row(k);
            let rhs_row = rhs.row(k);
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.cols != rhs.cols {
            return Err(TensorError::shape("matmul_t", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                let b = rhs.row(j);
                let mut acc = T::zero();
                for (&x, &y) in a.iter().zip(b) {
                    acc += x * y;
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::shape("add", self.shape(), rhs.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<(), TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::shape("add_assign", self.shape(), rhs.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn hadamard(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(TensorError::shape("hadamard", self.shape(), rhs.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| a * b)
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Column sums as a `1 x cols` tensor.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// Column slice `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let width = end - start;
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn write_cols(&mut self, start: usize, block: &Self) {
        for r in 0..self.rows {
            self.row_mut(r)[start..start + block.cols].copy_from_slice(block.row(r));
        }
    }

    /// Row slice `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Self) -> Result<Self, TensorError> {
        if self.cols != below.cols {
            return Err(TensorError::shape("vstack", self.shape(), below.shape()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Ok(Self {
            rows: self.rows + below.rows,
            cols: self.cols,
            data,
        })
    }

    /// Places `rhs` to the right of `self`.
    pub fn hstack(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.rows != rhs.rows {
            return Err(TensorError::shape("hstack", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.rows, self.cols + rhs.cols);
        out.write_cols(0, self);
        out.write_cols(self.cols, rhs);
        Ok(out)
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self, TensorError> {
        if rows * cols != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                (self.rows, self.cols),
                (rows, cols),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data: self.data,
        })
    }

    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Debug-build guard for non-finite values.
    #[inline]
    pub(crate) fn debug_check(&self, op: &'static str) {
        debug_assert!(self.is_finite(), "non-finite value produced by {op}");
    }
}
