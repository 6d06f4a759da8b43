//! Dense row-major f64 matrices. All training math runs in f64.

use crate::rng::StreamKey;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length {} != {rows}x{cols}", data.len());
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Mat { rows: 1, cols: data.len(), data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat { rows, cols, data: vec![value; rows * cols] }
    }

    /// Fan-in scaled Gaussian init: entries ~ N(0, 1/rows) for a [in, out]
    /// weight matrix.
    pub fn gaussian_fan_in(rows: usize, cols: usize, key: &StreamKey) -> Self {
        let std = 1.0 / (rows as f64).sqrt();
        let mut rng = key.rng();
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
            .collect();
        Mat { rows, cols, data }
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }
}

/// c = a @ b. The k-in-the-middle loop order keeps both operands streaming
/// row-major so the inner loop vectorizes.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {}x{} @ {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = Mat::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut out, false);
    out
}

/// out (+)= a @ b.
pub fn matmul_into(a: &Mat, b: &Mat, out: &mut Mat, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "matmul {}x{} @ {}x{}", a.rows, a.cols, b.rows, b.cols);
    assert_eq!(out.shape(), (a.rows, b.cols), "matmul output shape");
    if !accumulate {
        out.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// out (+)= a^T @ b, without materializing the transpose.
pub fn matmul_at_b_into(a: &Mat, b: &Mat, out: &mut Mat, accumulate: bool) {
    assert_eq!(a.rows, b.rows, "matmul_at_b {}x{} ^T @ {}x{}", a.rows, a.cols, b.rows, b.cols);
    assert_eq!(out.shape(), (a.cols, b.cols), "matmul_at_b output shape");
    if !accumulate {
        out.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let n = b.cols;
    for r in 0..a.rows {
        let a_row = &a.data[r * a.cols..(r + 1) * a.cols];
        let b_row = &b.data[r * n..(r + 1) * n];
        for (k, &ark) in a_row.iter().enumerate() {
            if ark == 0.0 {
                continue;
            }
            let out_row = &mut out.data[k * n..(k + 1) * n];
            for (o, &brj) in out_row.iter_mut().zip(b_row) {
                *o += ark * brj;
            }
        }
    }
}

/// out (+)= a @ b^T.
pub fn matmul_a_bt_into(a: &Mat, b: &Mat, out: &mut Mat, accumulate: bool) {
    assert_eq!(a.cols, b.cols, "matmul_a_bt {}x{} @ {}x{} ^T", a.rows, a.cols, b.rows, b.cols);
    assert_eq!(out.shape(), (a.rows, b.rows), "matmul_a_bt output shape");
    if !accumulate {
        out.data.iter_mut().for_each(|x| *x = 0.0);
    }
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let b_row = &b.data[j * b.cols..(j + 1) * b.cols];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out.data[i * b.rows + j] += dot;
        }
    }
}
