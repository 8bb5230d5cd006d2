//! Minimal dense 2-D float32 arrays, just enough for a toy transformer.
//!
//! Everything is row-major `Vec<f32>`, single-threaded, and allocation-happy:
//! clarity and bit-reproducibility over speed. Masked attention logits are
//! represented in-band with [`MASK_SENTINEL`] so a logit matrix is a plain
//! array rather than array-plus-mask; [`Matrix2D::softmax_rows`] understands
//! the sentinel and produces exact zeros for masked cells.

/// Reserved in-band "masked" value for attention logits: the most negative
/// finite `f32`.
///
/// A finite sentinel (rather than `-inf`) keeps every intermediate array
/// free of non-finite values, which makes "all values finite" a blanket
/// invariant that tests can assert anywhere. Real logits are dot products
/// of unit-scale activations and sit many orders of magnitude above it.
pub const MASK_SENTINEL: f32 = f32::MIN;

/// Returns true if `x` is the reserved masked-cell value.
#[inline]
#[must_use]
pub fn is_masked(x: f32) -> bool {
    x == MASK_SENTINEL
}

/// Dense row-major float32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix2D {
    /// All-zero matrix. Panics if either dimension is 0.
    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix2D { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from a flat row-major buffer. Panics if the length is wrong.
    #[must_use]
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        assert_eq!(data.len(), rows * cols, "buffer length {} != {rows}x{cols}", data.len());
        Matrix2D { rows, cols, data }
    }

    /// Builds by evaluating `f(row, col)` at every cell.
    #[must_use]
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut m = Matrix2D::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    #[must_use]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Borrow row `i` as a slice.
    #[inline]
    #[must_use]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable row access.
    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Flat row-major view of the whole buffer.
    #[inline]
    #[must_use]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Flat mutable view.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Matrix product `self * other`. Panics on inner-dimension mismatch.
    ///
    /// Accumulates in f32 with a fixed i-k-j loop order, so results are
    /// identical from run to run.
    #[must_use]
    pub fn matmul(&self, other: &Matrix2D) -> Matrix2D {
        assert_eq!(
            self.cols, other.rows,
            "matmul: inner dimensions differ ({}x{} * {}x{})",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix2D::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Transposed copy.
    #[must_use]
    pub fn transpose(&self) -> Matrix2D {
        Matrix2D::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// In-place elementwise addition. Panics on shape mismatch.
    pub fn add_assign(&mut self, other: &Matrix2D) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// In-place multiplication by a scalar.
    pub fn scale(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Row-wise softmax that understands [`MASK_SENTINEL`].
    ///
    /// Masked cells come out exactly 0.0 and are excluded from the
    /// normalization; each row of unmasked cells sums to 1 (up to float
    /// rounding). Panics if a row is entirely masked — attention upstream
    /// must always leave at least the diagonal unmasked.
    #[must_use]
    pub fn softmax_rows(&self) -> Matrix2D {
        let mut out = Matrix2D::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let row = self.row(i);
            let mut max = f32::NEG_INFINITY;
            for &x in row {
                if !is_masked(x) && x > max {
                    max = x;
                }
            }
            assert!(max > f32::NEG_INFINITY, "softmax_rows: row {i} is entirely masked");
            let out_row = out.row_mut(i);
            let mut sum = 0.0f64;
            for (o, &x) in out_row.iter_mut().zip(row) {
                if is_masked(x) {
                    *o = 0.0;
                } else {
                    let e = (x - max).exp();
                    *o = e;
                    sum += f64::from(e);
                }
            }
            let inv = (1.0 / sum) as f32;
            for o in out_row.iter_mut() {
                *o *= inv;
            }
        }
        out
    }

    /// True if every entry is finite.
    #[must_use]
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute difference against another matrix of the same shape.
    #[must_use]
    pub fn max_abs_diff(&self, other: &Matrix2D) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
