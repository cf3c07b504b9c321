//! Row-major `f32` matrix.

use crate::error::{Error, Result};

use super::dot64;

/// Dense row-major matrix of `f32`.
///
/// Invariant: every entry is finite after any public operation. Constructors
/// that accept caller data validate it; operations that could overflow to
/// infinity validate their output.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from a row-major buffer, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                context: format!("Matrix::from_vec({rows}x{cols})"),
                expected: rows * cols,
                got: data.len(),
            });
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("Matrix::from_vec")?;
        Ok(m)
    }

    /// Builds by evaluating `f(row, col)` for every cell in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    /// Borrow of one row.
    pub fn row(&self, row: usize) -> &[f32] {
        debug_assert!(row < self.rows);
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        debug_assert!(row < self.rows);
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Raw row-major storage.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `self @ rhs`. Requires `self.cols == rhs.rows`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(self.dim_mismatch("matmul", rhs));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.cols {
                let mut acc = 0.0f64;
                for (k, &a) in a_row.iter().enumerate() {
                    acc += f64::from(a) * f64::from(rhs.data[k * rhs.cols + j]);
                }
                out.data[i * rhs.cols + j] = acc as f32;
            }
        }
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// `self @ rhs.T`. Both operands are read row-contiguously, which makes
    /// this the cache-friendly kernel for weight application.
    pub fn matmul_tb(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(self.dim_mismatch("matmul_tb", rhs));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * rhs.rows..(i + 1) * rhs.rows];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot64(a_row, rhs.row(j)) as f32;
            }
        }
        out.check_finite("matmul_tb")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self += scale * other`, shape-checked.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f32) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.dim_mismatch("add_scaled", other));
        }
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += scale * s;
        }
        Ok(())
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: format!("{context} ({}x{})", self.rows, self.cols),
            })
        }
    }

    fn dim_mismatch(&self, op: &'static str, rhs: &Matrix) -> Error {
        Error::DimMismatch {
            op,
            left_rows: self.rows,
            left_cols: self.cols,
            right_rows: rhs.rows,
            right_cols: rhs.cols,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let m = Matrix::from_fn(3, 5, |i, j| (i * 10 + j) as f32);
        let t = m.transpose().transpose();
        assert_eq!(m, t);
    }

    #[test]
    fn add_scaled_rejects_shape_mismatch() {
        let mut a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(a.add_scaled(&b, 1.0).is_err());
    }
}
