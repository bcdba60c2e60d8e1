//! Dense row-major `f64` matrix.
//!
//! Embedding tables, feature blocks and latent representations are all
//! row-major: a node's vector is a contiguous slice, which is the access
//! pattern everything downstream (propagation, scoring, pooling) relies on.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from a flat row-major buffer. Length must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot form a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Splits the underlying storage into two disjoint row blocks
    /// `[0, at)` and `[at, rows)`.
    pub fn split_rows(&self, at: usize) -> (Mat, Mat) {
        assert!(at <= self.rows);
        let top = Mat {
            rows: at,
            cols: self.cols,
            data: self.data[..at * self.cols].to_vec(),
        };
        let bottom = Mat {
            rows: self.rows - at,
            cols: self.cols,
            data: self.data[at * self.cols..].to_vec(),
        };
        (top, bottom)
    }

    /// Stacks `top` over `bottom`; both must have the same column count.
    pub fn vstack(top: &Mat, bottom: &Mat) -> Result<Mat> {
        if top.cols != bottom.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns over {} columns",
                top.cols, bottom.cols
            )));
        }
        let mut data = Vec::with_capacity((top.rows + bottom.rows) * top.cols);
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Mat {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    /// Copies `src` into the row block starting at `row_offset`.
    pub fn copy_rows_from(&mut self, src: &Mat, row_offset: usize) {
        assert_eq!(self.cols, src.cols);
        assert!(row_offset + src.rows <= self.rows);
        let start = row_offset * self.cols;
        self.data[start..start + src.data.len()].copy_from_slice(&src.data);
    }

    /// `self[i][j] += scale[j] * other[i][j]` for every row `i`.
    pub fn add_col_scaled(&mut self, other: &Mat, scale: &[f64]) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        assert_eq!(self.cols, scale.len());
        for (dst, src) in self
            .data
            .chunks_exact_mut(self.cols)
            .zip(other.data.chunks_exact(self.cols))
        {
            for j in 0..scale.len() {
                dst[j] += scale[j] * src[j];
            }
        }
    }

    /// `self[i][j] = scale[j] * other[i][j]` for every row `i`.
    pub fn assign_col_scaled(&mut self, other: &Mat, scale: &[f64]) {
        self.fill(0.0);
        self.add_col_scaled(other, scale);
    }

    /// `self += alpha * other`, elementwise.
    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = self.rows.max(1) as f64;
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    /// L2-normalizes each row in place; zero rows are left untouched.
    /// Returns the number of zero-norm rows encountered.
    pub fn normalize_rows(&mut self) -> usize {
        let mut zero_rows = 0;
        for row in self.data.chunks_exact_mut(self.cols) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                zero_rows += 1;
            }
        }
        zero_rows
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Location of the first non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
